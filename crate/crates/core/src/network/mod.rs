//! Full classification and segmentation networks.

mod config;
mod interp;
mod metrics;
mod model;
mod vote;

pub use config::{parse_bool, parse_key_values, parse_list, parse_num, CenterSource, ModelConfig, Task};
pub use interp::{idw_interpolate, idw_weights, IdwWeights, COINCIDENT_DIST};
pub use metrics::{argmax, instance_accuracy, mean_iou, shape_iou};
pub use model::{classify_forward, segment_forward, NetworkParams, Pass, SegmentationOutput, SCORE_INIT_GAIN};
pub use vote::{vote_predict, vote_scores, vote_segment, VOTE_SCALE};
