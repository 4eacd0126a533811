//! Per-node rendering contribution and the level-major stream order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::binding::pose_forest;
use crate::forest::{Forest, NodeId};
use crate::mesh::{Camera, FrameVertices};
use crate::par;
use crate::render::{self, RenderError};

/// `W_i = sum over cameras and pixels of alpha * T` for every node's
/// Gaussian, from full-forest renders.
pub fn face_scores(
    forest: &Forest,
    cameras: &[Camera],
    frame: &FrameVertices,
    background: [f64; 3],
) -> Result<Vec<f64>, RenderError> {
    let posed = pose_forest(forest, frame);
    let ids: Vec<NodeId> = (0..forest.len() as NodeId).collect();
    let per_cam = par::map_indexed(cameras.len(), |c| {
        let splats = render::project_nodes(&posed, &ids, &cameras[c]);
        render::render(&splats, &cameras[c], background, None).map(|out| out.stats)
    });
    let mut scores = vec![0.0; forest.len()];
    for stats in per_cam {
        for s in stats? {
            scores[s.node_id as usize] += s.contrib;
        }
    }
    Ok(scores)
}

/// Stores `scores` in the nodes' `importance` fields.
pub fn assign_scores(forest: &mut Forest, scores: &[f64]) {
    for (i, &w) in scores.iter().enumerate() {
        if let Ok(n) = forest.node_mut(i as NodeId) {
            n.importance = w;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderEntry {
    pub parent: NodeId,
    /// Level of the parent.
    pub level: u8,
    /// Summed score of the three children.
    pub importance: f64,
}

/// Subdivision records in transmission order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamOrder {
    pub entries: Vec<OrderEntry>,
}

fn entries(forest: &Forest, scores: &[f64]) -> Vec<OrderEntry> {
    forest
        .nodes()
        .iter()
        .filter_map(|n| {
            let kids = n.children?;
            Some(OrderEntry {
                parent: n.id,
                level: n.level,
                importance: kids.iter().map(|&k| scores[k as usize]).sum(),
            })
        })
        .collect()
}

/// One record per subdivided node: levels ascending, importance descending
/// within a level, parent id ascending on ties.
pub fn build_order(forest: &Forest, scores: &[f64]) -> StreamOrder {
    let mut e = entries(forest, scores);
    e.sort_by(|a, b| {
        a.level
            .cmp(&b.level)
            .then(b.importance.total_cmp(&a.importance))
            .then(a.parent.cmp(&b.parent))
    });
    StreamOrder { entries: e }
}

/// Level-major order with a random permutation inside each level. The
/// ablation baseline for importance ranking.
pub fn random_order(forest: &Forest, scores: &[f64], rng: &mut impl Rng) -> StreamOrder {
    let mut e = entries(forest, scores);
    e.sort_by_key(|x| (x.level, x.parent));
    let mut start = 0;
    while start < e.len() {
        let level = e[start].level;
        let end = start + e[start..].iter().take_while(|x| x.level == level).count();
        e[start..end].shuffle(rng);
        start = end;
    }
    StreamOrder { entries: e }
}

impl StreamOrder {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ranking dump: `record_index,parent_node_id,level,importance`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("record_index,parent_node_id,level,importance\n");
        for (i, e) in self.entries.iter().enumerate() {
            out += &format!("{i},{},{},{:.12e}\n", e.parent, e.level, e.importance);
        }
        out
    }

    /// Keeps the entries whose root template face satisfies `keep`.
    pub fn filter_roots(&self, forest: &Forest, keep: impl Fn(NodeId) -> bool) -> StreamOrder {
        StreamOrder {
            entries: self
                .entries
                .iter()
                .copied()
                .filter(|e| keep(forest.root_of(e.parent)))
                .collect(),
        }
    }
}
