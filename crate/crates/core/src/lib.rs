//! Progressive mesh-anchored Gaussian assets.
//!
//! A template triangle mesh roots a forest of implicit 1-to-3 subdivisions.
//! Every forest node carries one Gaussian expressed in its face-local frame,
//! so the whole hierarchy follows the mesh through animation. Fitting grows
//! the forest where the screen-space signal asks for detail; afterwards the
//! nodes are ranked by rendering contribution and linearized into a
//! prefix-decodable stream that can be rendered at any transmitted fraction.

pub mod binding;
pub mod codec;
pub mod fit;
pub mod forest;
pub mod growth;
pub mod image;
pub mod importance;
pub mod mesh;
mod par;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod session;

pub use binding::{GaussianResidual, ResolvedGaussian};
pub use forest::{CornerRef, FaceNode, Forest, NodeId};
pub use image::Image;
pub use mesh::{Camera, FaceFrame, FrameVertices, TemplateMesh, Vec3};
