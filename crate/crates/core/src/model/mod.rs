//! Multi-branch network description shared by execution, accounting and the
//! weight file.
//!
//! A [`BranchNetSpec`] splits one student backbone into `M` sequential stages.
//! Exit branch `j` hangs off the output of stage `j` and maps it to the common
//! exit feature (`feature_dim` floats). Exit `M` is the backbone's own output
//! head. Stage and exit indices are 1-based throughout the public API.
//!
//! Weight names follow `s{student}.stage{j}.{layer}.{param}` and
//! `s{student}.exit{j}.{layer}.{param}`; the fusion head reads
//! `fusion.fc.weight` and `fusion.fc.bias`.

mod cost;
mod forward;
mod wrn;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layer::{LayerKind, LayerSpec};

pub use cost::{count_flops, count_params, FlopsReport, ParamReport};
pub use forward::{forward_exit, forward_features, forward_stage, fusion_forward};
pub use wrn::{
    build_wrn16, build_wrn16_with, WrnOptions, DEFAULT_EXIT_POSITIONS, WRN16_BOUNDARIES,
};

/// Pre-activation residual block: `a = preact(x)`, `out = body(a) + s` where
/// `s` is `x`, or the join's projection applied to `a`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub name: String,
    pub preact: Vec<LayerSpec>,
    pub body: Vec<LayerSpec>,
    pub join: LayerSpec,
}

impl ResidualBlock {
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.preact
            .iter()
            .chain(&self.body)
            .chain(std::iter::once(&self.join))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Layer(LayerSpec),
    Residual(ResidualBlock),
}

impl Node {
    pub fn layers(&self) -> Box<dyn Iterator<Item = &LayerSpec> + '_> {
        match self {
            Node::Layer(l) => Box::new(std::iter::once(l)),
            Node::Residual(b) => Box::new(b.layers()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchNetSpec {
    /// Shape of one input image, `C×H×W`.
    pub input_shape: Vec<usize>,
    pub width: usize,
    /// Convolution-layer label of each exit point, strictly increasing.
    pub exit_positions: Vec<usize>,
    pub stages: Vec<Vec<Node>>,
    pub exits: Vec<Vec<LayerSpec>>,
    /// Length of every exit feature vector.
    pub feature_dim: usize,
    pub class_count: usize,
}

/// Which part of a student a weight belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Stage(usize),
    Exit(usize),
}

impl BranchNetSpec {
    /// Number of exits `M`.
    pub fn exit_count(&self) -> usize {
        self.exits.len()
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        vec![self.feature_dim]
    }

    /// Checks structural invariants and shape chaining through every stage
    /// and exit.
    pub fn validate(&self) -> Result<()> {
        let m = self.exits.len();
        if m == 0 || self.stages.len() != m || self.exit_positions.len() != m {
            return Err(Error::InvalidSpec(format!(
                "need M >= 1 with equal stage/exit/position counts, got {}/{}/{}",
                self.stages.len(),
                m,
                self.exit_positions.len()
            )));
        }
        if self.exit_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec(format!(
                "exit positions {:?} are not strictly increasing",
                self.exit_positions
            )));
        }
        if self.class_count == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidSpec(
                "class count and feature dim must be positive".into(),
            ));
        }
        let mut shape = self.input_shape.clone();
        for j in 1..=m {
            let mut names = HashSet::new();
            for layer in self.stages[j - 1].iter().flat_map(Node::layers) {
                if !names.insert(layer.name.as_str()) {
                    return Err(Error::InvalidSpec(format!(
                        "duplicate layer name `{}` in stage {j}",
                        layer.name
                    )));
                }
            }
            shape = self.stage_output_shape_from(j, &shape)?;
            let mut exit_shape = shape.clone();
            let mut names = HashSet::new();
            for layer in &self.exits[j - 1] {
                if !names.insert(layer.name.as_str()) {
                    return Err(Error::InvalidSpec(format!(
                        "duplicate layer name `{}` in exit {j}",
                        layer.name
                    )));
                }
                exit_shape = layer.output_shape(&exit_shape)?;
            }
            if exit_shape != self.feature_shape() {
                return Err(Error::InvalidSpec(format!(
                    "exit {j} produces {exit_shape:?}, expected {:?}",
                    self.feature_shape()
                )));
            }
        }
        Ok(())
    }

    fn stage_output_shape_from(&self, stage: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for node in &self.stages[stage - 1] {
            shape = match node {
                Node::Layer(l) => l.output_shape(&shape)?,
                Node::Residual(block) => {
                    let mut preact = shape.clone();
                    for l in &block.preact {
                        preact = l.output_shape(&preact)?;
                    }
                    let mut main = preact.clone();
                    for l in &block.body {
                        main = l.output_shape(&main)?;
                    }
                    let shortcut = match &block.join.kind {
                        LayerKind::AddShortcut { projection: None } => shape.clone(),
                        LayerKind::AddShortcut {
                            projection: Some(conv),
                        } => {
                            LayerSpec::conv(block.join.name.clone(), *conv).output_shape(&preact)?
                        }
                        _ => {
                            return Err(Error::InvalidSpec(format!(
                                "block `{}` must end in a shortcut join",
                                block.name
                            )))
                        }
                    };
                    if shortcut != main {
                        return Err(Error::InvalidSpec(format!(
                            "block `{}`: shortcut shape {shortcut:?} does not match main path {main:?}",
                            block.name
                        )));
                    }
                    block.join.output_shape(&main)?
                }
            };
        }
        Ok(shape)
    }

    /// Activation shape entering stage `stage` (1-based).
    pub fn stage_input_shape(&self, stage: usize) -> Result<Vec<usize>> {
        self.check_index("stage", stage)?;
        let mut shape = self.input_shape.clone();
        for j in 1..stage {
            shape = self.stage_output_shape_from(j, &shape)?;
        }
        Ok(shape)
    }

    /// Activation shape at boundary `stage`, i.e. the input of exit `stage`.
    pub fn stage_output_shape(&self, stage: usize) -> Result<Vec<usize>> {
        let input = self.stage_input_shape(stage)?;
        self.stage_output_shape_from(stage, &input)
    }

    pub(crate) fn check_index(&self, what: &'static str, index: usize) -> Result<()> {
        let count = self.exit_count();
        if index == 0 || index > count {
            return Err(Error::IndexOutOfRange { what, index, count });
        }
        Ok(())
    }

    /// The fusion head for `students` students: concatenated exit features
    /// to class logits.
    pub fn fusion_layer(&self, students: usize) -> LayerSpec {
        LayerSpec::fc(
            "fusion.fc",
            students * self.feature_dim,
            self.class_count,
            true,
        )
    }

    /// Every named tensor a `students`-student model reads, in a stable order.
    pub fn param_shapes(&self, students: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for s in 0..students {
            for j in 1..=self.exit_count() {
                for layer in self.stages[j - 1].iter().flat_map(Node::layers) {
                    push_params(&mut out, &weight_prefix(s, Segment::Stage(j)), layer);
                }
                for layer in &self.exits[j - 1] {
                    push_params(&mut out, &weight_prefix(s, Segment::Exit(j)), layer);
                }
            }
        }
        let fusion = self.fusion_layer(students);
        for (p, shape) in fusion.param_shapes() {
            out.push((format!("{}.{p}", fusion.name), shape));
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form of this spec.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn push_params(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, layer: &LayerSpec) {
    for (p, shape) in layer.param_shapes() {
        out.push((format!("{prefix}.{}.{p}", layer.name), shape));
    }
}

/// Weight-name prefix for one student segment, e.g. `s0.stage2`.
pub fn weight_prefix(student: usize, segment: Segment) -> String {
    match segment {
        Segment::Stage(j) => format!("s{student}.stage{j}"),
        Segment::Exit(j) => format!("s{student}.exit{j}"),
    }
}
