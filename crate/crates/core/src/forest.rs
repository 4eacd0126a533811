//! The per-face subdivision forest.
//!
//! Each template face roots a tree. Subdividing a node inserts one point
//! `p = b0 v0 + b1 v1 + b2 v2` inside its triangle and fans it into three
//! children; child `c` has corners `(corner[c], corner[(c + 1) % 3], p)`.
//! Nodes are append-only and ids are dense in creation order, so every split
//! point is owned by a node with a smaller id than any node that uses it.

use crate::binding::GaussianResidual;
use crate::mesh::{FrameVertices, TemplateMesh, Vec3};

pub type NodeId = u32;

pub const SIMPLEX_TOL: f64 = 1e-6;
pub const CENTROID_BETA: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForestError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("node {0} is already subdivided")]
    NotALeaf(NodeId),
    #[error("node {node} at level {level} cannot be split under cap {cap}")]
    DepthCapReached { node: NodeId, level: u8, cap: u8 },
    #[error("barycentric coordinates {0:?} are not on the simplex")]
    InvalidBarycentric([f64; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CornerRef {
    TemplateVertex(u32),
    /// The subdivision point owned by this node.
    SplitPoint(NodeId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceNode {
    pub id: NodeId,
    pub level: u8,
    pub parent: Option<NodeId>,
    pub corners: [CornerRef; 3],
    /// Present iff the node has been subdivided.
    pub beta: Option<[f64; 3]>,
    pub children: Option<[NodeId; 3]>,
    pub gaussian: GaussianResidual,
    pub grad_accum: f64,
    pub grad_samples: u32,
    pub importance: f64,
}

impl FaceNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    nodes: Vec<FaceNode>,
    root_count: usize,
    depth_cap: u8,
    max_level: u8,
}

pub fn on_simplex(beta: &[f64; 3], tol: f64) -> bool {
    beta.iter().all(|b| b.is_finite() && *b >= -tol) && (beta.iter().sum::<f64>() - 1.0).abs() <= tol
}

pub fn child_vertex(beta: &[f64; 3], corners: &[Vec3; 3]) -> Result<Vec3, ForestError> {
    if !on_simplex(beta, SIMPLEX_TOL) {
        return Err(ForestError::InvalidBarycentric(*beta));
    }
    Ok(blend(beta, corners))
}

fn blend(beta: &[f64; 3], corners: &[Vec3; 3]) -> Vec3 {
    corners[0] * beta[0] + corners[1] * beta[1] + corners[2] * beta[2]
}

/// Euclidean projection onto `{b >= 0, sum b = 1}` (sort-and-threshold).
pub fn project_simplex(raw: [f64; 3]) -> [f64; 3] {
    let mut sorted = raw;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k as f64 + 1.0);
        if u - t > 0.0 {
            theta = t;
        }
    }
    raw.map(|v| (v - theta).max(0.0))
}

impl Forest {
    /// One level-0 node per template face, depth cap at `max_level`.
    pub fn new(mesh: &TemplateMesh, max_level: u8) -> Self {
        let nodes = mesh
            .faces()
            .iter()
            .enumerate()
            .map(|(i, f)| FaceNode {
                id: i as NodeId,
                level: 0,
                parent: None,
                corners: f.map(CornerRef::TemplateVertex),
                beta: None,
                children: None,
                gaussian: GaussianResidual::default(),
                grad_accum: 0.0,
                grad_samples: 0,
                importance: 0.0,
            })
            .collect();
        Self {
            nodes,
            root_count: mesh.face_count(),
            depth_cap: max_level,
            max_level,
        }
    }

    pub fn nodes(&self) -> &[FaceNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&FaceNode, ForestError> {
        self.nodes.get(id as usize).ok_or(ForestError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut FaceNode, ForestError> {
        self.nodes.get_mut(id as usize).ok_or(ForestError::UnknownNode(id))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_count(&self) -> usize {
        self.root_count
    }

    pub fn depth_cap(&self) -> u8 {
        self.depth_cap
    }

    pub fn set_depth_cap(&mut self, cap: u8) {
        self.depth_cap = cap.min(self.max_level);
    }

    pub fn max_level(&self) -> u8 {
        self.max_level
    }

    pub fn gaussians_mut(&mut self) -> impl Iterator<Item = &mut GaussianResidual> {
        self.nodes.iter_mut().map(|n| &mut n.gaussian)
    }

    /// Template face index at the root of `id`'s tree.
    pub fn root_of(&self, mut id: NodeId) -> NodeId {
        while let Some(p) = self.nodes[id as usize].parent {
            id = p;
        }
        id
    }

    /// Splits a leaf at the centroid with fresh default child Gaussians.
    pub fn subdivide(&mut self, id: NodeId) -> Result<[NodeId; 3], ForestError> {
        let node = self.node(id)?;
        let cap = self.depth_cap.min(self.max_level);
        if node.level >= cap {
            return Err(ForestError::DepthCapReached {
                node: id,
                level: node.level,
                cap,
            });
        }
        self.split_unchecked(id, CENTROID_BETA, [GaussianResidual::default(); 3])
    }

    /// Splits a leaf with a given split point and child residuals. Only the
    /// structural level bound (`max_level`) is enforced, not the training cap.
    pub fn subdivide_with(
        &mut self,
        id: NodeId,
        beta: [f64; 3],
        children: [GaussianResidual; 3],
    ) -> Result<[NodeId; 3], ForestError> {
        let node = self.node(id)?;
        if node.level >= self.max_level {
            return Err(ForestError::DepthCapReached {
                node: id,
                level: node.level,
                cap: self.max_level,
            });
        }
        if !on_simplex(&beta, SIMPLEX_TOL) {
            return Err(ForestError::InvalidBarycentric(beta));
        }
        self.split_unchecked(id, beta, children)
    }

    fn split_unchecked(
        &mut self,
        id: NodeId,
        beta: [f64; 3],
        children: [GaussianResidual; 3],
    ) -> Result<[NodeId; 3], ForestError> {
        let node = &self.nodes[id as usize];
        if !node.is_leaf() {
            return Err(ForestError::NotALeaf(id));
        }
        let corners = node.corners;
        let level = node.level + 1;
        let first = self.nodes.len() as NodeId;
        let ids = [first, first + 1, first + 2];
        for (c, gaussian) in children.into_iter().enumerate() {
            self.nodes.push(FaceNode {
                id: ids[c],
                level,
                parent: Some(id),
                corners: [corners[c], corners[(c + 1) % 3], CornerRef::SplitPoint(id)],
                beta: None,
                children: None,
                gaussian,
                grad_accum: 0.0,
                grad_samples: 0,
                importance: 0.0,
            });
        }
        let node = &mut self.nodes[id as usize];
        node.beta = Some(beta);
        node.children = Some(ids);
        Ok(ids)
    }

    /// Replaces the split point of a subdivided node with the simplex
    /// projection of `raw`.
    pub fn set_beta_projected(&mut self, id: NodeId, raw: [f64; 3]) -> Result<(), ForestError> {
        let node = self.node_mut(id)?;
        match node.beta.as_mut() {
            Some(b) => {
                *b = project_simplex(raw);
                Ok(())
            }
            None => Err(ForestError::NotALeaf(id)),
        }
    }

    /// Recursive resolution of one node's triangle under `frame`.
    pub fn resolve_corners(&self, id: NodeId, frame: &FrameVertices) -> [Vec3; 3] {
        self.nodes[id as usize].corners.map(|c| self.resolve_ref(c, frame))
    }

    fn resolve_ref(&self, corner: CornerRef, frame: &FrameVertices) -> Vec3 {
        match corner {
            CornerRef::TemplateVertex(v) => frame.positions()[v as usize],
            CornerRef::SplitPoint(owner) => {
                let beta = self.nodes[owner as usize]
                    .beta
                    .expect("split point owner is subdivided");
                blend(&beta, &self.resolve_corners(owner, frame))
            }
        }
    }

    /// Resolves every node in one forward pass over ids.
    pub fn resolve_all(&self, frame: &FrameVertices) -> Vec<[Vec3; 3]> {
        let mut tris: Vec<[Vec3; 3]> = Vec::with_capacity(self.nodes.len());
        let mut split: Vec<Vec3> = vec![Vec3::zeros(); self.nodes.len()];
        for node in &self.nodes {
            let tri = node.corners.map(|c| match c {
                CornerRef::TemplateVertex(v) => frame.positions()[v as usize],
                CornerRef::SplitPoint(owner) => split[owner as usize],
            });
            if let Some(beta) = node.beta {
                split[node.id as usize] = blend(&beta, &tri);
            }
            tris.push(tri);
        }
        tris
    }

    pub fn max_level_present(&self) -> u8 {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn leaves_at_finest(&self) -> Vec<NodeId> {
        let finest = self.max_level_present();
        self.nodes
            .iter()
            .filter(|n| n.is_leaf() && n.level == finest)
            .map(|n| n.id)
            .collect()
    }

    /// Cumulative render set: every node at or above `level`.
    pub fn level_render_set(&self, level: u8) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.level <= level).map(|n| n.id).collect()
    }

    /// Node count per level, index = level.
    pub fn level_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.max_level_present() as usize + 1];
        for n in &self.nodes {
            hist[n.level as usize] += 1;
        }
        hist
    }

    pub fn subdivided_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    /// Deepest level reached in each root's tree.
    pub fn depth_per_root(&self) -> Vec<u8> {
        let mut depth = vec![0u8; self.root_count];
        for n in &self.nodes {
            let r = self.root_of(n.id) as usize;
            depth[r] = depth[r].max(n.level);
        }
        depth
    }

    pub fn reset_growth_stats(&mut self) {
        for n in &mut self.nodes {
            n.grad_accum = 0.0;
            n.grad_samples = 0;
        }
    }

    /// Rounds all residuals and split points through `f32`, the precision of
    /// the asset format.
    pub fn quantize_to_wire(&mut self) {
        for n in &mut self.nodes {
            n.gaussian = n.gaussian.quantized();
            if let Some(b) = n.beta.as_mut() {
                *b = b.map(|v| v as f32 as f64);
            }
        }
    }

    /// Checks structural invariants. Used by tests and by the decoder fuzzing.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id as usize != i {
                return Err(format!("node {i} has id {}", n.id));
            }
            if n.beta.is_some() != n.children.is_some() {
                return Err(format!("node {i}: beta/children mismatch"));
            }
            if let Some(b) = n.beta {
                if !on_simplex(&b, SIMPLEX_TOL) {
                    return Err(format!("node {i}: beta {b:?} off simplex"));
                }
            }
            if n.level > self.max_level {
                return Err(format!("node {i}: level above max"));
            }
            match n.parent {
                None if i >= self.root_count => return Err(format!("node {i}: orphan")),
                Some(p) => {
                    let parent = self.node(p).map_err(|e| e.to_string())?;
                    if p >= n.id || parent.level + 1 != n.level {
                        return Err(format!("node {i}: bad parent link"));
                    }
                    if !parent.children.is_some_and(|c| c.contains(&n.id)) {
                        return Err(format!("node {i}: parent does not list it"));
                    }
                }
                None => {}
            }
            for c in n.corners {
                if let CornerRef::SplitPoint(o) = c {
                    if o >= n.id || self.nodes[o as usize].beta.is_none() {
                        return Err(format!("node {i}: bad split-point corner"));
                    }
                }
            }
            n.gaussian.check(1e-4).map_err(|e| format!("node {i}: {e}"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_face() -> (TemplateMesh, FrameVertices) {
        let mesh = TemplateMesh::new(3, vec![[0, 1, 2]]).unwrap();
        let frame = FrameVertices::new(vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(3., 0., 0.),
            Vec3::new(0., 3., 0.),
        ])
        .unwrap();
        (mesh, frame)
    }

    #[test]
    fn child_vertex_examples() {
        let c = [Vec3::new(0., 0., 0.), Vec3::new(3., 0., 0.), Vec3::new(0., 3., 0.)];
        assert!((child_vertex(&CENTROID_BETA, &c).unwrap() - Vec3::new(1., 1., 0.)).norm() < 1e-15);
        assert_eq!(child_vertex(&[1.0, 0.0, 0.0], &c).unwrap(), c[0]);
        assert!(matches!(
            child_vertex(&[0.5, 0.6, 0.0], &c),
            Err(ForestError::InvalidBarycentric(_))
        ));
    }

    #[test]
    fn subdivide_assigns_ids_and_levels() {
        let (mesh, frame) = one_face();
        let mut f = Forest::new(&mesh, 4);
        assert_eq!(f.subdivide(0).unwrap(), [1, 2, 3]);
        assert!(f.nodes()[1..].iter().all(|n| n.level == 1 && n.parent == Some(0)));
        assert_eq!(f.node(0).unwrap().gaussian, GaussianResidual::default());
        assert_eq!(f.subdivide(0), Err(ForestError::NotALeaf(0)));
        let corners = f.resolve_corners(1, &frame);
        assert!((corners[2] - Vec3::new(1., 1., 0.)).norm() < 1e-15);
        assert_eq!(f.resolve_corners(0, &frame), frame.triangle([0, 1, 2]));
        f.check_invariants().unwrap();
    }

    #[test]
    fn depth_cap_blocks_split() {
        let (mesh, _) = one_face();
        let mut f = Forest::new(&mesh, 4);
        f.set_depth_cap(1);
        let kids = f.subdivide(0).unwrap();
        assert!(matches!(
            f.subdivide(kids[0]),
            Err(ForestError::DepthCapReached { cap: 1, .. })
        ));
    }

    #[test]
    fn two_level_resolution_matches_manual_evaluation() {
        let (mesh, frame) = one_face();
        let mut f = Forest::new(&mesh, 4);
        let kids = f.subdivide(0).unwrap();
        f.set_beta_projected(0, [0.2, 0.5, 0.3]).unwrap();
        let grand = f.subdivide(kids[1]).unwrap();
        f.set_beta_projected(kids[1], [0.6, 0.1, 0.3]).unwrap();
        let v = frame.positions();
        let p = 0.2 * v[0] + 0.5 * v[1] + 0.3 * v[2];
        // child 1 corners are (v1, v2, p)
        let q = 0.6 * v[1] + 0.1 * v[2] + 0.3 * p;
        let c = f.resolve_corners(grand[2], &frame);
        // grandchild 2 corners are (p, v1, q)
        assert!((c[0] - p).norm() < 1e-14);
        assert!((c[1] - v[1]).norm() < 1e-14);
        assert!((c[2] - q).norm() < 1e-14);
        assert_eq!(f.resolve_all(&frame)[grand[2] as usize], c);
    }

    #[test]
    fn finest_leaves() {
        let (mesh, _) = one_face();
        let mut f = Forest::new(&mesh, 4);
        assert_eq!(f.leaves_at_finest(), vec![0]);
        f.subdivide(0).unwrap();
        assert_eq!(f.leaves_at_finest(), vec![1, 2, 3]);
        f.subdivide(2).unwrap();
        assert_eq!(f.leaves_at_finest(), vec![4, 5, 6]);
        assert_eq!(f.level_histogram(), vec![1, 3, 3]);
        assert_eq!(f.level_render_set(0), vec![0]);
        assert_eq!(f.level_render_set(1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_simplex(CENTROID_BETA), CENTROID_BETA);
        assert_eq!(project_simplex([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0]);
        let p = project_simplex([0.5, 0.5, -3.0]);
        assert_eq!(p, [0.5, 0.5, 0.0]);
    }
}
