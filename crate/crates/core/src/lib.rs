//! Attribute normalisation, edge building, the user-link graph, connected
//! components, and incremental cluster detection.

pub mod attribute;
pub mod cc;
pub mod classifier;
pub mod detector;
pub mod edges;
pub mod graph;
