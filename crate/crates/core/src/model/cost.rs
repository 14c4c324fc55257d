use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layer::flops_of_sequence;

use super::{BranchNetSpec, Node};

/// Per-segment FLOPs of one student. Index `j - 1` holds stage/exit `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub backbone: Vec<u64>,
    pub exits: Vec<u64>,
}

impl FlopsReport {
    pub fn backbone_total(&self) -> u64 {
        self.backbone.iter().sum()
    }

    pub fn exit_total(&self) -> u64 {
        self.exits.iter().sum()
    }

    /// Backbone plus the final exit: the cost of the plain single-exit network.
    pub fn network_total(&self) -> u64 {
        self.backbone_total() + self.exits.last().copied().unwrap_or(0)
    }

    /// Backbone plus every exit branch.
    pub fn total_with_exits(&self) -> u64 {
        self.backbone_total() + self.exit_total()
    }

    /// Extra cost of the early exits (all but the last) relative to the plain
    /// network.
    pub fn early_exit_overhead(&self) -> f64 {
        let early: u64 = self.exits[..self.exits.len() - 1].iter().sum();
        early as f64 / self.network_total() as f64
    }

    /// Backbone FLOPs of stages `1..=exit`.
    pub fn cumulative_backbone(&self, exit: usize) -> u64 {
        self.backbone[..exit].iter().sum()
    }
}

/// Trainable parameter counts of one student.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub stages: Vec<u64>,
    pub exits: Vec<u64>,
    /// Linear classifier a standalone single student would carry on top of
    /// its final feature (`feature_dim × classes + classes`).
    pub classifier: u64,
}

impl ParamReport {
    /// Stages, final exit and classifier: the plain single-exit network.
    pub fn backbone_total(&self) -> u64 {
        self.stages.iter().sum::<u64>() + self.exits.last().copied().unwrap_or(0) + self.classifier
    }

    pub fn early_exit_total(&self) -> u64 {
        self.exits[..self.exits.len() - 1].iter().sum()
    }

    pub fn total_with_exits(&self) -> u64 {
        self.backbone_total() + self.early_exit_total()
    }

    pub fn early_exit_overhead(&self) -> f64 {
        self.early_exit_total() as f64 / self.backbone_total() as f64
    }
}

pub fn count_flops(spec: &BranchNetSpec) -> Result<FlopsReport> {
    let mut shape = spec.input_shape.clone();
    let mut backbone = Vec::with_capacity(spec.exit_count());
    let mut exits = Vec::with_capacity(spec.exit_count());
    for j in 1..=spec.exit_count() {
        let mut stage = 0;
        for node in &spec.stages[j - 1] {
            match node {
                Node::Layer(l) => {
                    stage += l.flops(&shape)?;
                    shape = l.output_shape(&shape)?;
                }
                Node::Residual(block) => {
                    let (pre, a) = flops_of_sequence(&block.preact, &shape)?;
                    let (body, y) = flops_of_sequence(&block.body, &a)?;
                    stage += pre + body + block.join.flops(&y)?;
                    shape = block.join.output_shape(&y)?;
                }
            }
        }
        backbone.push(stage);
        exits.push(flops_of_sequence(&spec.exits[j - 1], &shape)?.0);
    }
    Ok(FlopsReport { backbone, exits })
}

pub fn count_params(spec: &BranchNetSpec) -> ParamReport {
    let stages = spec
        .stages
        .iter()
        .map(|nodes| {
            nodes
                .iter()
                .flat_map(Node::layers)
                .map(|l| l.param_count())
                .sum()
        })
        .collect();
    let exits = spec
        .exits
        .iter()
        .map(|layers| layers.iter().map(|l| l.param_count()).sum())
        .collect();
    ParamReport {
        stages,
        exits,
        classifier: (spec.feature_dim * spec.class_count + spec.class_count) as u64,
    }
}
