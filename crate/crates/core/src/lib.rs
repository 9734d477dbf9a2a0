//! Conditional distributionally robust learning from noisy crowdsourced
//! labels.
//!
//! The robust loss uses a Wasserstein ball around each instance's label
//! posterior. With a 0/1 ground cost the ball collapses to a total-variation
//! ball, which gives a closed-form empirical dual and simple optimal actions.

pub mod classifier;
pub mod error;
pub mod experiment;
pub mod io;
pub mod noise_sim;
pub mod optimal_action;
pub mod oracles;
pub mod posterior;
pub mod pseudo_label;
pub mod trainer;
pub mod types;
pub mod wasserstein_dual;

pub use error::{Error, Result};
pub use types::{
    Annotation, AnnotationDataset, CategoricalDist, Curvature, LabelSpace, LossTransform,
    RobustLossSpec, Transform,
};
