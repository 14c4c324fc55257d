use crate::error::{Error, Result};
use crate::kernels;
use crate::layer::{mismatch, LayerKind, LayerSpec};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

use super::{weight_prefix, BranchNetSpec, Node, Segment};

/// Batchnorm epsilon used by every normalization layer.
pub const BN_EPSILON: f32 = 1e-5;

/// Runs the backbone layers of stage `stage` (1-based) for one student.
pub fn forward_stage(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    student: usize,
    stage: usize,
    input: &Tensor,
) -> Result<Tensor> {
    spec.check_index("stage", stage)?;
    let expected = spec.stage_input_shape(stage)?;
    if input.shape() != expected {
        return Err(mismatch(
            &weight_prefix(student, Segment::Stage(stage)),
            format!("stage input {expected:?}"),
            input.shape(),
        ));
    }
    let prefix = weight_prefix(student, Segment::Stage(stage));
    let mut x = input.clone();
    for node in &spec.stages[stage - 1] {
        x = match node {
            Node::Layer(layer) => apply(layer, &prefix, weights, &x)?,
            Node::Residual(block) => {
                let mut a = x.clone();
                for layer in &block.preact {
                    a = apply(layer, &prefix, weights, &a)?;
                }
                let mut y = a.clone();
                for layer in &block.body {
                    y = apply(layer, &prefix, weights, &y)?;
                }
                let name = format!("{prefix}.{}", block.join.name);
                let shortcut = match &block.join.kind {
                    LayerKind::AddShortcut {
                        projection: Some(conv),
                    } => kernels::conv2d_forward(
                        &name,
                        &a,
                        conv,
                        weights.require(&format!("{name}.weight"))?,
                        conv.bias
                            .then(|| weights.require(&format!("{name}.bias")))
                            .transpose()?,
                    )?,
                    _ => x,
                };
                kernels::add(&name, &shortcut, &y)?
            }
        };
    }
    Ok(x)
}

/// Maps the activation at boundary `exit` to the exit feature `F_exit`.
pub fn forward_exit(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    student: usize,
    exit: usize,
    stage_output: &Tensor,
) -> Result<Tensor> {
    spec.check_index("exit", exit)?;
    let prefix = weight_prefix(student, Segment::Exit(exit));
    let mut x = stage_output.clone();
    for layer in &spec.exits[exit - 1] {
        x = apply(layer, &prefix, weights, &x)?;
    }
    if x.shape() != spec.feature_shape() {
        return Err(mismatch(
            &prefix,
            format!("feature {:?}", spec.feature_shape()),
            x.shape(),
        ));
    }
    Ok(x)
}

/// Concatenates one exit feature per student and applies the fusion head.
pub fn fusion_forward(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    features: &[Tensor],
) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::Config(
            "fusion needs at least one student feature".into(),
        ));
    }
    let mut concat = Vec::with_capacity(features.len() * spec.feature_dim);
    for (i, f) in features.iter().enumerate() {
        if f.shape() != spec.feature_shape() {
            return Err(mismatch(
                &format!("fusion input {i}"),
                format!("{:?}", spec.feature_shape()),
                f.shape(),
            ));
        }
        concat.extend_from_slice(f.data());
    }
    let layer = spec.fusion_layer(features.len());
    apply(&layer, "", weights, &Tensor::from_slice(&concat))
}

/// Every exit feature of one student, in exit order, from a single pass.
pub fn forward_features(
    spec: &BranchNetSpec,
    weights: &WeightStore,
    student: usize,
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut x = input.clone();
    let mut features = Vec::with_capacity(spec.exit_count());
    for j in 1..=spec.exit_count() {
        x = forward_stage(spec, weights, student, j, &x)?;
        features.push(forward_exit(spec, weights, student, j, &x)?);
    }
    Ok(features)
}

fn apply(layer: &LayerSpec, prefix: &str, weights: &WeightStore, x: &Tensor) -> Result<Tensor> {
    let name = if prefix.is_empty() {
        layer.name.clone()
    } else {
        format!("{prefix}.{}", layer.name)
    };
    let param = |p: &str| weights.require(&format!("{name}.{p}"));
    match &layer.kind {
        LayerKind::Conv2d(conv) => kernels::conv2d_forward(
            &name,
            x,
            conv,
            param("weight")?,
            conv.bias.then(|| param("bias")).transpose()?,
        ),
        LayerKind::BatchNorm { channels } => {
            if x.shape().first() != Some(channels) {
                return Err(mismatch(&name, format!("{channels} channels"), x.shape()));
            }
            kernels::batchnorm_forward(
                &name,
                x,
                param("gamma")?,
                param("beta")?,
                param("running_mean")?,
                param("running_var")?,
                BN_EPSILON,
            )
        }
        LayerKind::Relu => Ok(kernels::relu(x)),
        LayerKind::AvgPool { kernel, stride } => kernels::avgpool(&name, x, *kernel, *stride),
        LayerKind::GlobalAvgPool => kernels::global_avgpool(&name, x),
        LayerKind::Fc { in_dim, bias, .. } => {
            if x.len() != *in_dim {
                return Err(mismatch(
                    &name,
                    format!("{in_dim} input features"),
                    x.shape(),
                ));
            }
            kernels::fc_forward(
                &name,
                x,
                param("weight")?,
                bias.then(|| param("bias")).transpose()?,
            )
        }
        LayerKind::AddShortcut { .. } => Err(Error::InvalidSpec(format!(
            "`{name}`: shortcut joins are only valid inside residual blocks"
        ))),
    }
}
