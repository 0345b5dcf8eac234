//! Box extraction from localization maps and box-based accuracies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Grid;

/// Inclusive pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::invalid(
                "bbox",
                format!("corners ({x_min},{y_min}) and ({x_max},{y_max}) are inverted"),
            ));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x_max < width && self.y_max < height
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    let inter = if x0 <= x1 && y0 <= y1 {
        (x1 - x0 + 1) * (y1 - y0 + 1)
    } else {
        0
    };
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// One tight box per 4-connected component of `map > theta`, in raster
/// order of each component's first pixel.
pub fn boxes_from_map(map: &Grid<f64>, theta: f64) -> Vec<BBox> {
    let (h, w) = map.dims();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || map.data[start] <= theta {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut b = BBox {
            x_min: start % w,
            y_min: start / w,
            x_max: start % w,
            y_max: start / w,
        };
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
            let mut visit = |j: usize| {
                if !seen[j] && map.data[j] > theta {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        boxes.push(b);
    }
    boxes
}

/// Largest IoU between any predicted box and `gt`; 0 with no boxes.
pub fn best_iou(pred: &[BBox], gt: &BBox) -> f64 {
    pred.iter().map(|b| iou(b, gt)).fold(0.0, f64::max)
}

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaAccuracy {
    pub iou_threshold: f64,
    pub accuracy: f64,
    pub best_theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAccuracy {
    pub per_threshold: Vec<DeltaAccuracy>,
    pub mean: f64,
}

impl BoxAccuracy {
    pub fn at(&self, delta: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|d| d.iou_threshold == delta)
            .map(|d| d.accuracy)
    }
}

fn check_counts(op: &'static str, maps: usize, boxes: usize) -> Result<()> {
    if maps != boxes {
        return Err(Error::invalid(op, format!("{maps} maps for {boxes} ground-truth boxes")));
    }
    Ok(())
}

/// For each IoU threshold, the box accuracy maximized over `theta_grid`
/// (smallest θ on ties), and the mean over thresholds.
pub fn max_box_acc_v2(
    maps: &[Grid<f64>],
    gt: &[BBox],
    iou_thresholds: &[f64],
    theta_grid: &[f64],
) -> Result<BoxAccuracy> {
    check_counts("max_box_acc_v2", maps.len(), gt.len())?;
    if theta_grid.is_empty() || iou_thresholds.is_empty() {
        return Err(Error::invalid("max_box_acc_v2", "empty threshold grid"));
    }
    let n = maps.len().max(1) as f64;
    // best[θ][image]
    let best: Vec<Vec<f64>> = theta_grid
        .iter()
        .map(|&t| maps.iter().zip(gt).map(|(m, g)| best_iou(&boxes_from_map(m, t), g)).collect())
        .collect();
    let per_threshold: Vec<DeltaAccuracy> = iou_thresholds
        .iter()
        .map(|&delta| {
            let mut top = DeltaAccuracy {
                iou_threshold: delta,
                accuracy: -1.0,
                best_theta: theta_grid[0],
            };
            for (&t, ious) in theta_grid.iter().zip(&best) {
                let acc = ious.iter().filter(|&&v| v >= delta).count() as f64 / n;
                if acc > top.accuracy {
                    top.accuracy = acc;
                    top.best_theta = t;
                }
            }
            top
        })
        .collect();
    let mean = per_threshold.iter().map(|d| d.accuracy).sum::<f64>() / per_threshold.len() as f64;
    Ok(BoxAccuracy { per_threshold, mean })
}

/// Fraction of images whose best box at `theta` reaches IoU `delta`.
pub fn gt_known_accuracy(maps: &[Grid<f64>], gt: &[BBox], delta: f64, theta: f64) -> Result<f64> {
    check_counts("gt_known_accuracy", maps.len(), gt.len())?;
    let hits = maps
        .iter()
        .zip(gt)
        .filter(|(m, g)| best_iou(&boxes_from_map(m, theta), g) >= delta)
        .count();
    Ok(hits as f64 / maps.len().max(1) as f64)
}

/// An image counts when its predicted class is right and its best box
/// reaches IoU `delta` at `theta`.
pub fn top1_localization(
    predicted: &[usize],
    truth: &[usize],
    maps: &[Grid<f64>],
    gt: &[BBox],
    delta: f64,
    theta: f64,
) -> Result<f64> {
    check_counts("top1_localization", maps.len(), gt.len())?;
    if predicted.len() != maps.len() || truth.len() != maps.len() {
        return Err(Error::invalid("top1_localization", "prediction, label and map counts differ"));
    }
    let hits = (0..maps.len())
        .filter(|&i| predicted[i] == truth[i] && best_iou(&boxes_from_map(&maps[i], theta), &gt[i]) >= delta)
        .count();
    Ok(hits as f64 / maps.len().max(1) as f64)
}
