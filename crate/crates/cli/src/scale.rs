use dssync::analysis::{collective_size, sync_scale, CostModel, ScaleMode};
use dssync::comm::Topology;
use serde::Serialize;

use crate::config::rule;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRow {
    pub label: String,
    /// `None` when the topology cannot serve this world size.
    pub scale: Option<usize>,
    pub cost: Option<f64>,
}

pub fn label(topology: Topology, mode: ScaleMode) -> String {
    let base = match topology {
        Topology::Ps => "PS",
        Topology::Ring => "Ring",
        Topology::Tree => "Tree",
    };
    match mode {
        ScaleMode::Flat => base.to_string(),
        ScaleMode::Ds => format!("DS-{base}"),
    }
}

pub fn scale_row(topology: Topology, world: usize, mode: ScaleMode, cost: &CostModel) -> Result<ScaleRow, CliError> {
    let scale = sync_scale(topology, world, mode).map_err(|e| CliError::Config(rule(e)))?;
    let members = collective_size(world, mode).map_err(|e| CliError::Config(rule(e)))?;
    Ok(ScaleRow {
        label: label(topology, mode),
        scale: Some(scale),
        cost: Some(cost.overall_cost(topology, scale, members)),
    })
}

/// The five rows of the comparison table; rows that do not apply are `n/a`.
pub fn compare_rows(world: usize, cost: &CostModel) -> Vec<ScaleRow> {
    [
        (Topology::Ps, ScaleMode::Flat),
        (Topology::Ring, ScaleMode::Flat),
        (Topology::Tree, ScaleMode::Flat),
        (Topology::Ring, ScaleMode::Ds),
        (Topology::Tree, ScaleMode::Ds),
    ]
    .into_iter()
    .map(|(topology, mode)| {
        scale_row(topology, world, mode, cost).unwrap_or(ScaleRow {
            label: label(topology, mode),
            scale: None,
            cost: None,
        })
    })
    .collect()
}

pub fn render(world: usize, rows: &[ScaleRow]) -> String {
    let mut out = format!("W = {world}\n{:<8} {:>8} {:>14}\n", "row", "scale", "cost");
    for row in rows {
        let scale = row.scale.map_or("n/a".to_string(), |s| s.to_string());
        let cost = row.cost.map_or("n/a".to_string(), |c| c.to_string());
        out.push_str(&format!("{:<8} {:>8} {:>14}\n", row.label, scale, cost));
    }
    out
}

pub fn cmd_scale(
    topology: Topology,
    world: usize,
    ds: bool,
    compare: bool,
    cost: &CostModel,
) -> Result<String, CliError> {
    cost.validate().map_err(|e| CliError::Config(rule(e)))?;
    let rows = if compare {
        compare_rows(world, cost)
    } else {
        let mode = if ds { ScaleMode::Ds } else { ScaleMode::Flat };
        vec![scale_row(topology, world, mode, cost)?]
    };
    Ok(render(world, &rows))
}
