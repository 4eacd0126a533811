//! Fit, rank and encode in one call.

use crate::codec;
use crate::fit::{fit, FitConfig, FitError, FitLog, SupervisionSet};
use crate::forest::Forest;
use crate::importance::{assign_scores, build_order, face_scores, StreamOrder};
use crate::mesh::TemplateMesh;

#[derive(Clone, Debug)]
pub struct BuildOutput {
    /// Fitted forest rounded to wire precision, in fitting ids.
    pub forest: Forest,
    pub scores: Vec<f64>,
    /// Transmission order in fitting ids.
    pub order: StreamOrder,
    /// The same order in the ids a decoder assigns.
    pub ranking: StreamOrder,
    pub asset: Vec<u8>,
    pub log: FitLog,
}

/// Fits a fresh forest on `mesh`, scores it from the supervision cameras and
/// encodes it in importance order.
pub fn build(mesh: &TemplateMesh, sup: &SupervisionSet, config: &FitConfig) -> Result<BuildOutput, FitError> {
    sup.frame()
        .check_mesh(mesh)
        .map_err(|e| FitError::Supervision(e.to_string()))?;
    let mut forest = Forest::new(mesh, config.growth.max_level);
    let log = fit(&mut forest, sup, config)?;
    forest.quantize_to_wire();
    let scores = face_scores(&forest, sup.cameras(), sup.frame(), config.background)?;
    assign_scores(&mut forest, &scores);
    let order = build_order(&forest, &scores);
    let asset = codec::encode(&forest, &order).expect("importance order is level-major");
    let ranking = codec::order_in_stream_ids(&forest, &order).expect("order was just encoded");
    Ok(BuildOutput {
        forest,
        scores,
        order,
        ranking,
        asset,
        log,
    })
}
