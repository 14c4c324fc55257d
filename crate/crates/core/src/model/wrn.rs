//! WideResNet-16×k with exit branches at residual-block boundaries.
//!
//! The backbone is pre-activation WRN-16: a 3×3 stem, then three groups of two
//! basic blocks with widths `16k`, `32k`, `64k`. Blocks that change width or
//! resolution carry a 1×1 projection shortcut. Downsampling blocks run their
//! first 3×3 convolution at input resolution and halve it with a 2×2 average
//! pool before the second convolution.
//!
//! Exit points are labelled by convolution-layer index. Counting the opening
//! block of each group as three layers (two 3×3 convolutions and the shortcut
//! slot), block boundaries fall on layers 1, 4, 6, 9, 11, 14 and 16.

use crate::error::{Error, Result};
use crate::layer::{Conv2dSpec, LayerSpec};

use super::{BranchNetSpec, Node, ResidualBlock};

/// Every layer label at which an exit may be attached.
pub const WRN16_BOUNDARIES: [usize; 7] = [1, 4, 6, 9, 11, 14, 16];

/// The seven-exit layout used by the reference two-student configuration.
pub const DEFAULT_EXIT_POSITIONS: [usize; 7] = WRN16_BOUNDARIES;

const BASE_WIDTH: usize = 16;
const BLOCKS_PER_GROUP: usize = 2;
/// Early exits pool with this kernel (clamped to the spatial extent).
const EXIT_POOL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WrnOptions {
    pub width: usize,
    pub exit_positions: Vec<usize>,
    pub class_count: usize,
    /// Square input extent; must be a positive multiple of 4.
    pub input_size: usize,
}

impl WrnOptions {
    pub fn new(width: usize, exit_positions: &[usize], class_count: usize) -> Self {
        Self {
            width,
            exit_positions: exit_positions.to_vec(),
            class_count,
            input_size: 32,
        }
    }

    pub fn input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }
}

/// Builds WRN-16×`width` on 3×32×32 inputs with exits at `exit_positions`.
pub fn build_wrn16(
    width: usize,
    exit_positions: &[usize],
    class_count: usize,
) -> Result<BranchNetSpec> {
    build_wrn16_with(&WrnOptions::new(width, exit_positions, class_count))
}

pub fn build_wrn16_with(opts: &WrnOptions) -> Result<BranchNetSpec> {
    check_positions(&opts.exit_positions)?;
    if opts.width == 0 {
        return Err(Error::InvalidSpec(
            "width multiplier must be positive".into(),
        ));
    }
    if opts.class_count == 0 {
        return Err(Error::InvalidSpec("class count must be positive".into()));
    }
    if opts.input_size == 0 || !opts.input_size.is_multiple_of(4) {
        return Err(Error::InvalidSpec(format!(
            "input size {} is not a positive multiple of 4",
            opts.input_size
        )));
    }

    let widths = [
        BASE_WIDTH * opts.width,
        2 * BASE_WIDTH * opts.width,
        4 * BASE_WIDTH * opts.width,
    ];
    let feature_dim = widths[2];

    // Backbone as a flat node list, with the (channels, extent) after each
    // boundary: index 0 is the stem, index b the b-th block.
    let mut nodes = vec![Node::Layer(LayerSpec::conv(
        "stem",
        Conv2dSpec::new(3, BASE_WIDTH, 3, 1, 1),
    ))];
    let mut boundary = vec![(BASE_WIDTH, opts.input_size)];
    let (mut channels, mut extent) = (BASE_WIDTH, opts.input_size);
    let mut index = 0;
    for (g, &out) in widths.iter().enumerate() {
        for b in 0..BLOCKS_PER_GROUP {
            index += 1;
            let downsample = g > 0 && b == 0;
            nodes.push(Node::Residual(basic_block(
                index, channels, out, downsample,
            )));
            channels = out;
            if downsample {
                extent /= 2;
            }
            boundary.push((channels, extent));
        }
    }

    // Node ranges per stage: boundary label -> number of nodes consumed.
    let mut stages = Vec::new();
    let mut exits = Vec::new();
    let mut consumed = 0;
    let mut nodes = nodes.into_iter();
    for (j, &pos) in opts.exit_positions.iter().enumerate() {
        let b = WRN16_BOUNDARIES
            .iter()
            .position(|&p| p == pos)
            .expect("checked");
        let take = b + 1 - consumed;
        stages.push(nodes.by_ref().take(take).collect::<Vec<_>>());
        consumed = b + 1;
        let (c, r) = boundary[b];
        let last = j + 1 == opts.exit_positions.len();
        exits.push(if last {
            backbone_head(c)
        } else {
            early_exit(c, r, feature_dim)
        });
    }

    let spec = BranchNetSpec {
        input_shape: vec![3, opts.input_size, opts.input_size],
        width: opts.width,
        exit_positions: opts.exit_positions.clone(),
        stages,
        exits,
        feature_dim,
        class_count: opts.class_count,
    };
    spec.validate()?;
    Ok(spec)
}

fn check_positions(positions: &[usize]) -> Result<()> {
    let fail = |reason: &str| Error::InvalidExitPositions {
        given: positions.to_vec(),
        valid: WRN16_BOUNDARIES.to_vec(),
        reason: reason.to_string(),
    };
    if positions.is_empty() {
        return Err(fail("at least one exit is required"));
    }
    if let Some(p) = positions.iter().find(|p| !WRN16_BOUNDARIES.contains(p)) {
        return Err(fail(&format!("{p} is not a residual-block boundary")));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(fail("positions must be strictly increasing"));
    }
    if positions.last() != Some(&16) {
        return Err(fail("the last exit must be the backbone output at 16"));
    }
    Ok(())
}

fn basic_block(index: usize, in_ch: usize, out_ch: usize, downsample: bool) -> ResidualBlock {
    let name = format!("b{index}");
    let l = |s: &str| format!("{name}.{s}");
    let mut body = vec![LayerSpec::conv(
        l("conv1"),
        Conv2dSpec::new(in_ch, out_ch, 3, 1, 1),
    )];
    if downsample {
        body.push(LayerSpec::avgpool(l("pool"), 2, 2));
    }
    body.extend([
        LayerSpec::batchnorm(l("bn2"), out_ch),
        LayerSpec::relu(l("relu2")),
        LayerSpec::conv(l("conv2"), Conv2dSpec::new(out_ch, out_ch, 3, 1, 1)),
    ]);
    let projection = (in_ch != out_ch || downsample)
        .then(|| Conv2dSpec::new(in_ch, out_ch, 1, if downsample { 2 } else { 1 }, 0));
    ResidualBlock {
        preact: vec![
            LayerSpec::batchnorm(l("bn1"), in_ch),
            LayerSpec::relu(l("relu1")),
        ],
        body,
        join: LayerSpec::add_shortcut(l("shortcut"), projection),
        name,
    }
}

/// Final exit: the backbone's own BN → ReLU → global pool.
fn backbone_head(channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::batchnorm("bn", channels),
        LayerSpec::relu("relu"),
        LayerSpec::global_avgpool("gap"),
    ]
}

/// Early exit: average pool → 1×1 projection to the feature width → ReLU →
/// global pool.
fn early_exit(channels: usize, extent: usize, feature_dim: usize) -> Vec<LayerSpec> {
    let k = EXIT_POOL.min(extent);
    vec![
        LayerSpec::avgpool("pool", k, k),
        LayerSpec::conv("proj", Conv2dSpec::new(channels, feature_dim, 1, 1, 0)),
        LayerSpec::relu("relu"),
        LayerSpec::global_avgpool("gap"),
    ]
}
