//! Segmentation and localization metrics.

pub mod loc;
pub mod seg;

pub use loc::{boxes_from_map, gt_known_accuracy, iou, DEFAULT_IOU_THRESHOLDS, DeltaAccuracy, max_box_acc_v2, top1_localization, BBox, BoxAccuracy};
pub use seg::{miou, precision_recall_f1, proportion_of_noise, ConfusionCounts, MiouReport, NoiseCounts, PrfReport};
