//! Iterative anti-adversarial manipulation of an image ("adversarial
//! climbing") and aggregation of the resulting class maps.
//!
//! Each step evaluates the objective
//!
//! ```text
//! L = y_c - Σ_{k≠c} y_k - λ ‖M ⊙ |CAM(x^{t-1}) - CAM(x^0)|‖₁
//! ```
//!
//! on `x^{t-1}` and moves the image along `±ξ ∇L`. All maps inside the
//! objective are rectified, max-normalized and at feature resolution. The
//! restricting mask `M` and the normalization denominator are constants of
//! the step; the live map inside the penalty carries gradient.
//!
//! The final map is the normalized sum of the rectified maps of
//! `x^0, …, x^T`.

use serde::{Deserialize, Serialize};

use crate::attribution::{normalize_grid, AttributionMap, CamModel, Resolution};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Grid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Ascend the objective.
    Climb,
    /// Descend it, as an adversarial attack would.
    Attack,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Climb => 1.0,
            Direction::Attack => -1.0,
        }
    }
}

/// Hyperparameter presets for the two tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Localization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimbConfig {
    pub steps: usize,
    pub step_size: f64,
    pub lambda: f64,
    pub tau: f64,
    pub direction: Direction,
    pub suppress_other_classes: bool,
    /// Feature-resolution background mask from a saliency detector.
    #[serde(skip)]
    pub saliency_background: Option<Grid<bool>>,
}

impl Default for ClimbConfig {
    fn default() -> Self {
        Self::for_task(Task::Segmentation)
    }
}

impl ClimbConfig {
    pub fn for_task(task: Task) -> Self {
        ClimbConfig {
            steps: 27,
            step_size: 0.008,
            lambda: match task {
                Task::Segmentation => 7.0,
                Task::Localization => 0.01,
            },
            tau: 0.5,
            direction: Direction::Climb,
            suppress_other_classes: true,
            saliency_background: None,
        }
    }

    /// Plain climbing of the target logit: no penalty, no suppression.
    pub fn unregularized(steps: usize, step_size: f64) -> Self {
        ClimbConfig {
            steps,
            step_size,
            lambda: 0.0,
            suppress_other_classes: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("ClimbConfig", "step size must be finite and nonnegative"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("ClimbConfig", "lambda must be finite and nonnegative"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid("ClimbConfig", "tau must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    CamThreshold,
    CamThresholdWithSaliency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestrictingMask {
    pub mask: Grid<bool>,
    pub source: MaskSource,
}

impl RestrictingMask {
    pub fn count(&self) -> usize {
        self.mask.data.iter().filter(|&&m| m).count()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.mask.height, self.mask.width], |i| self.mask.data[i] as u8 as f64)
    }
}

/// `1(cam > τ) ∪ D` on a normalized map.
pub fn restricting_mask(
    cam_prev: &Grid<f64>,
    tau: f64,
    saliency_background: Option<&Grid<bool>>,
) -> Result<RestrictingMask> {
    let mut mask = cam_prev.map(|&v| v > tau);
    let mut source = MaskSource::CamThreshold;
    if let Some(bg) = saliency_background {
        if !bg.same_dims(cam_prev) {
            return Err(Error::shape(
                "restricting_mask",
                &[cam_prev.height, cam_prev.width],
                &[bg.height, bg.width],
            ));
        }
        for (m, &b) in mask.data.iter_mut().zip(&bg.data) {
            *m |= b;
        }
        source = MaskSource::CamThresholdWithSaliency;
    }
    Ok(RestrictingMask { mask, source })
}

/// Feature-resolution background mask from an image-resolution saliency
/// foreground: a cell is background when no foreground pixel falls in it.
pub fn saliency_background(saliency_fg: &Grid<bool>, height: usize, width: usize) -> Result<Grid<bool>> {
    let (h, w) = saliency_fg.dims();
    if height == 0 || width == 0 || h % height != 0 || w % width != 0 {
        return Err(Error::invalid(
            "saliency_background",
            format!("{h}x{w} saliency does not tile a {height}x{width} grid"),
        ));
    }
    let (sy, sx) = (h / height, w / width);
    Ok(Grid::from_fn(height, width, |y, x| {
        !(0..sy).any(|dy| (0..sx).any(|dx| *saliency_fg.at(y * sy + dy, x * sx + dx)))
    }))
}

/// Graph handles and values of one objective evaluation.
#[derive(Debug)]
pub struct Objective {
    pub loss: Var,
    pub logits: Vec<f64>,
    /// Rectified, unnormalized map of the evaluated image.
    pub cam: Grid<f64>,
    /// Value of `‖M ⊙ |CAM − CAM(x^0)|‖₁` (before multiplying by λ).
    pub penalty: f64,
}

/// Terms of the climbing objective that do not depend on the image.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms<'a> {
    pub class: usize,
    pub initial_cam: &'a Grid<f64>,
    pub mask: &'a RestrictingMask,
    pub lambda: f64,
    pub suppress_other_classes: bool,
}

/// Records `L` for `image` on `g`.
pub fn climb_objective(
    model: &impl CamModel,
    g: &mut Graph,
    image: Var,
    terms: ObjectiveTerms<'_>,
) -> Result<Objective> {
    let vars = model.build_cam(g, image, terms.class)?;
    finish_objective(g, vars.logits, vars.raw_cam, terms)
}

fn finish_objective(g: &mut Graph, logits: Var, raw_cam: Var, terms: ObjectiveTerms<'_>) -> Result<Objective> {
    let k = g.value(logits).len();
    let mut loss = g.select(logits, terms.class)?;
    if terms.suppress_other_classes {
        for other in (0..k).filter(|&o| o != terms.class) {
            let y = g.select(logits, other)?;
            loss = g.sub(loss, y)?;
        }
    }
    let rect = g.relu(raw_cam);
    let cam = Grid::from_tensor(g.value(rect))?;
    let (h, w) = cam.dims();
    if !terms.initial_cam.same_dims(&cam) || !terms.mask.mask.same_dims(&cam) {
        return Err(Error::shape(
            "climb_objective",
            &[h, w],
            &[terms.initial_cam.height, terms.initial_cam.width],
        ));
    }
    let peak = cam.max();
    let norm = g.scale(rect, if peak > 0.0 { 1.0 / peak } else { 1.0 });
    let reference = g.constant(Tensor::new(vec![1, h, w], terms.initial_cam.data.clone())?);
    let diff = g.sub(norm, reference)?;
    let diff = g.abs(diff);
    let m = g.constant(terms.mask.as_tensor());
    let masked = g.mul(diff, m)?;
    let penalty = g.sum(masked);
    let penalty_value = g.value(penalty).data()[0];
    if terms.lambda != 0.0 {
        let weighted = g.scale(penalty, terms.lambda);
        loss = g.sub(loss, weighted)?;
    }
    Ok(Objective {
        loss,
        logits: g.value(logits).data().to_vec(),
        cam,
        penalty: penalty_value,
    })
}

/// Everything observed while taking one step from `x^{t-1}`.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next: Tensor,
    pub logits: Vec<f64>,
    /// Rectified, unnormalized map of `x^{t-1}`.
    pub cam: Grid<f64>,
    pub mask: RestrictingMask,
    pub gradient: Tensor,
    pub objective: f64,
}

/// One update `x^t = x^{t-1} ± ξ ∇L`. `initial_cam` is the normalized map
/// of `x^0`; `step` is `t` and only used for error reporting.
pub fn climb_step(
    model: &impl CamModel,
    x_prev: &Tensor,
    class: usize,
    config: &ClimbConfig,
    initial_cam: &Grid<f64>,
    step: usize,
) -> Result<StepOutcome> {
    if !x_prev.is_finite() {
        return Err(Error::invalid("climb_step", format!("non-finite image entering step {step}")));
    }
    let mut g = Graph::new();
    let x = g.variable(x_prev.clone());
    let vars = model.build_cam(&mut g, x, class)?;
    let current = normalize_grid(&Grid::from_tensor(g.value(vars.raw_cam))?.map(|v| v.max(0.0)));
    let mask = restricting_mask(&current, config.tau, config.saliency_background.as_ref())?;
    let objective = finish_objective(
        &mut g,
        vars.logits,
        vars.raw_cam,
        ObjectiveTerms {
            class,
            initial_cam,
            mask: &mask,
            lambda: config.lambda,
            suppress_other_classes: config.suppress_other_classes,
        },
    )?;
    let mut grads = g.backward(objective.loss)?;
    let gradient = grads.take(x)?;
    if !gradient.is_finite() {
        return Err(Error::NonFiniteGradient { step });
    }
    let mut next = x_prev.clone();
    next.axpy(config.direction.sign() * config.step_size, &gradient)?;
    Ok(StepOutcome {
        next,
        logits: objective.logits,
        cam: objective.cam,
        mask,
        objective: g.value(objective.loss).data()[0],
        gradient,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub image: Tensor,
    /// Rectified, unnormalized map.
    pub cam: Grid<f64>,
    pub logits: Vec<f64>,
    /// Mask used for the step that produced this image; `None` at `t = 0`.
    pub mask: Option<RestrictingMask>,
}

impl TraceStep {
    pub fn normalized_cam(&self) -> Grid<f64> {
        normalize_grid(&self.cam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClimbTrace {
    pub class: usize,
    pub config: ClimbConfig,
    /// Entries for `t = 0..=T`.
    pub steps: Vec<TraceStep>,
    /// Normalized aggregate over all steps.
    pub final_map: AttributionMap,
}

impl ClimbTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Normalized sum of the maps of `x^0..=x^t`.
    pub fn aggregate_through(&self, t: usize) -> AttributionMap {
        aggregate(self.class, t, self.steps[..=t].iter().map(|s| &s.cam))
    }

    /// Normalized map of the last manipulated image only.
    pub fn last_step_map(&self) -> AttributionMap {
        let last = self.steps.len() - 1;
        AttributionMap {
            class: self.class,
            step: last,
            values: self.steps[last].normalized_cam(),
            normalized: true,
            resolution: Resolution::Feature,
        }
    }

    pub fn initial_map(&self) -> AttributionMap {
        AttributionMap {
            class: self.class,
            step: 0,
            values: self.steps[0].normalized_cam(),
            normalized: true,
            resolution: Resolution::Feature,
        }
    }
}

pub fn aggregate<'a>(class: usize, step: usize, maps: impl Iterator<Item = &'a Grid<f64>>) -> AttributionMap {
    let mut sum: Option<Grid<f64>> = None;
    for m in maps {
        match &mut sum {
            None => sum = Some(m.clone()),
            Some(s) => s.data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b),
        }
    }
    let sum = sum.expect("at least one map");
    AttributionMap {
        class,
        step,
        values: normalize_grid(&sum),
        normalized: true,
        resolution: Resolution::Feature,
    }
}

/// Runs `config.steps` steps from `image` and aggregates the maps.
pub fn run_climb(model: &impl CamModel, image: &Tensor, class: usize, config: &ClimbConfig) -> Result<ClimbTrace> {
    config.validate()?;
    model.check_class(class)?;
    let mut steps: Vec<TraceStep> = Vec::with_capacity(config.steps + 1);
    let mut x = image.clone();
    let mut initial: Option<Grid<f64>> = None;
    let mut pending_mask = None;
    for t in 1..=config.steps {
        let reference = match &initial {
            Some(r) => r.clone(),
            None => {
                let (raw, _) = crate::attribution::raw_cam(model, &x, class)?;
                let r = normalize_grid(&raw.map(|v| v.max(0.0)));
                initial = Some(r.clone());
                r
            }
        };
        let out = climb_step(model, &x, class, config, &reference, t)?;
        steps.push(TraceStep {
            image: std::mem::replace(&mut x, out.next),
            cam: out.cam,
            logits: out.logits,
            mask: pending_mask.take(),
        });
        pending_mask = Some(out.mask);
    }
    let (raw, logits) = crate::attribution::raw_cam(model, &x, class)?;
    steps.push(TraceStep {
        image: x,
        cam: raw.map(|v| v.max(0.0)),
        logits,
        mask: pending_mask,
    });
    let final_map = aggregate(class, config.steps, steps.iter().map(|s| &s.cam));
    Ok(ClimbTrace {
        class,
        config: config.clone(),
        steps,
        final_map,
    })
}
