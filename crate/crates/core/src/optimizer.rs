//! Pose fitting by limited-memory quasi-Newton maximization of the
//! similarity, and the frame-to-frame tracking loop.
//!
//! The minimizer works on `f(Theta) = -E(Theta) / (|K_M| |K_P|)`, plus an
//! optional continuity penalty `lambda |Theta - Theta_init|^2`. Quaternion
//! blocks are renormalized after every accepted step; `E` is invariant to
//! their scale so the objective value is unchanged.

use std::collections::VecDeque;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{GsogError, Result};
use crate::gaussian::SoG;
use crate::gradients::Objective;
use crate::kinematics::{GSoGTemplate, Pose};
use crate::similarity::SimilarityOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Lbfgs,
    SteepestDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub method: Method,
    /// Number of `(s, y)` pairs kept by L-BFGS.
    pub memory_pairs: usize,
    pub max_iterations: usize,
    /// Stop when `|g|_inf <= gradient_tolerance * |f|`.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step moves no parameter by more than
    /// `step_tolerance * max(1, |x|_inf)`.
    pub step_tolerance: f64,
    /// Stop when the relative objective decrease falls below this.
    pub function_tolerance: f64,
    /// Sufficient-decrease constant of the strong Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
    pub max_line_search_iterations: usize,
    /// Largest parameter change of the first trial step when no curvature
    /// information is available.
    pub initial_step: f64,
    /// Extra optimization rounds with precisions re-posed at the latest
    /// estimate. Zero refreshes once per call, at the initial pose.
    pub precision_refreshes: usize,
    /// Weight of the continuity penalty; zero disables it.
    pub continuity_weight: f64,
    pub parallel: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            method: Method::Lbfgs,
            memory_pairs: 8,
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-9,
            function_tolerance: 1e-12,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_iterations: 30,
            initial_step: 0.05,
            precision_refreshes: 0,
            continuity_weight: 0.0,
            parallel: false,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GsogError::InvalidArgument(format!("optimizer: {what}")));
        if self.memory_pairs == 0 && self.method == Method::Lbfgs {
            return bad("memory_pairs must be positive");
        }
        if self.max_iterations == 0 || self.max_line_search_iterations == 0 {
            return bad("iteration limits must be positive");
        }
        for (name, v) in [
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("function_tolerance", self.function_tolerance),
            ("initial_step", self.initial_step),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return bad("line search requires 0 < c1 < c2 < 1");
        }
        if !(self.continuity_weight >= 0.0) || !self.continuity_weight.is_finite() {
            return bad("continuity_weight must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailure,
    EmptyData,
    Failed,
}

impl Termination {
    /// Whether the outcome should be reported to the user as suspect.
    pub fn is_flagged(&self) -> bool {
        matches!(
            self,
            Termination::LineSearchFailure | Termination::EmptyData | Termination::Failed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Similarity `E` after each accepted iterate, starting with the initial pose.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub message: Option<String>,
}

impl FitDiagnostics {
    pub fn flagged(&self) -> bool {
        self.termination.is_flagged()
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub pose: Pose,
    pub diagnostics: FitDiagnostics,
}

/// A differentiable objective for [`minimize`].
pub trait Problem {
    /// Value and gradient, or `None` when `x` is outside the domain.
    fn evaluate(&self, x: &[f64]) -> Option<(f64, Vec<f64>)>;

    /// Maps an accepted iterate onto an equivalent canonical point, adjusting
    /// the gradient accordingly. The objective value must not change.
    fn canonicalize(&self, _x: &mut [f64], _g: &mut [f64]) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Objective after each accepted iterate, starting at `x0`.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

struct LineSearch<'a, P: Problem> {
    problem: &'a P,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    evaluations: usize,
    max_evaluations: usize,
    best: Option<Trial>,
}

impl<P: Problem> LineSearch<'_, P> {
    fn eval(&mut self, alpha: f64) -> Option<Trial> {
        self.evaluations += 1;
        let xt: Vec<f64> = self.x.iter().zip(self.d).map(|(x, d)| x + alpha * d).collect();
        let (f, g) = self.problem.evaluate(&xt)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let slope = dot(&g, self.d);
        let trial = Trial { alpha, f, g, slope };
        if trial.f < self.f0 && self.best.as_ref().is_none_or(|b| trial.f < b.f) {
            self.best = Some(Trial {
                alpha,
                f: trial.f,
                g: trial.g.clone(),
                slope,
            });
        }
        Some(trial)
    }

    fn armijo(&self, t: &Trial) -> bool {
        t.f <= self.f0 + self.c1 * t.alpha * self.slope0
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.c2 * self.slope0
    }

    /// Strong Wolfe search by bracketing and zooming.
    fn run(&mut self, alpha_init: f64) -> Option<Trial> {
        let mut prev = Trial {
            alpha: 0.0,
            f: self.f0,
            g: Vec::new(),
            slope: self.slope0,
        };
        let mut alpha = alpha_init;
        let mut first = true;
        while self.evaluations < self.max_evaluations {
            let t = match self.eval(alpha) {
                Some(t) => t,
                None => {
                    // outside the domain: shrink toward the last good point
                    alpha = 0.5 * (prev.alpha + alpha);
                    continue;
                }
            };
            if !self.armijo(&t) || (!first && t.f >= prev.f) {
                return self.zoom(prev, t);
            }
            if self.curvature(&t) {
                return Some(t);
            }
            if t.slope >= 0.0 {
                return self.zoom(t, prev);
            }
            first = false;
            alpha = 2.0 * t.alpha;
            prev = t;
        }
        None
    }

    fn zoom(&mut self, mut lo: Trial, mut hi: Trial) -> Option<Trial> {
        while self.evaluations < self.max_evaluations {
            let alpha = interpolate(&lo, &hi);
            if (hi.alpha - lo.alpha).abs() <= 1e-14 * lo.alpha.abs().max(hi.alpha.abs()) {
                return None;
            }
            let t = match self.eval(alpha) {
                Some(t) => t,
                None => {
                    hi = Trial {
                        alpha,
                        f: f64::INFINITY,
                        g: Vec::new(),
                        slope: f64::NAN,
                    };
                    continue;
                }
            };
            if !self.armijo(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if self.curvature(&t) {
                    return Some(t);
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        None
    }
}

/// Minimizer of the cubic through two trials, safeguarded into the interior
/// of the bracket; falls back to bisection.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !hi.f.is_finite() || !hi.slope.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let alpha = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (lower, upper) = (a.min(b), a.max(b));
    let margin = 0.1 * (upper - lower);
    if alpha.is_finite() && alpha > lower + margin && alpha < upper - margin {
        alpha
    } else {
        mid
    }
}

/// L-BFGS (or steepest descent) with a strong Wolfe line search.
pub fn minimize<P: Problem>(problem: &P, x0: &[f64], settings: &OptimizerSettings) -> Result<Minimum> {
    settings.validate()?;
    let mut x = x0.to_vec();
    let (mut f, mut g) = problem
        .evaluate(&x)
        .ok_or_else(|| GsogError::InvalidArgument("objective undefined at the initial point".into()))?;
    problem.canonicalize(&mut x, &mut g);
    let mut evaluations = 1;
    let mut trace = vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut last_step: Option<f64> = None;

    while iterations < settings.max_iterations {
        if norm_inf(&g) <= settings.gradient_tolerance * f.abs() {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut d = match settings.method {
            Method::Lbfgs => two_loop(&g, &history),
            Method::SteepestDescent => g.iter().map(|v| -v).collect(),
        };
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let alpha0 = if settings.method == Method::Lbfgs && !history.is_empty() {
                1.0
            } else {
                let scaled = settings.initial_step / norm_inf(&d).max(f64::MIN_POSITIVE);
                last_step.map_or(scaled, |s| s.min(scaled * 10.0).max(scaled * 1e-3))
            };
            let mut ls = LineSearch {
                problem,
                x: &x,
                d: &d,
                f0: f,
                slope0: slope,
                c1: settings.c1,
                c2: settings.c2,
                evaluations: 0,
                max_evaluations: settings.max_line_search_iterations,
                best: None,
            };
            let found = ls.run(alpha0);
            evaluations += ls.evaluations;
            if let Some(t) = found {
                accepted = Some(t);
                break;
            }
            if attempt == 0 && !history.is_empty() {
                debug!("line search failed; restarting from steepest descent");
                history.clear();
                d = g.iter().map(|v| -v).collect();
                slope = dot(&g, &d);
                continue;
            }
            // keep any strict decrease found on the way
            accepted = ls.best.take();
            if accepted.is_some() {
                termination = Termination::LineSearchFailure;
            }
            break;
        }

        let Some(t) = accepted else {
            termination = Termination::LineSearchFailure;
            break;
        };
        iterations += 1;
        let mut x_new: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + t.alpha * d).collect();
        let mut g_new = t.g;
        problem.canonicalize(&mut x_new, &mut g_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && settings.method == Method::Lbfgs {
            if history.len() == settings.memory_pairs {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        let decrease = f - t.f;
        last_step = Some(t.alpha);
        let x_scale = norm_inf(&x_new).max(1.0);
        x = x_new;
        g = g_new;
        let f_prev = f;
        f = t.f;
        trace.push(f);
        if termination == Termination::LineSearchFailure {
            break;
        }
        if norm_inf(&s) <= settings.step_tolerance * x_scale {
            termination = Termination::StepTolerance;
            break;
        }
        if decrease <= settings.function_tolerance * f_prev.abs() {
            termination = Termination::FunctionTolerance;
            break;
        }
    }

    Ok(Minimum {
        x,
        value: f,
        gradient: g,
        trace,
        iterations,
        evaluations,
        termination,
    })
}

/// Two-loop recursion: returns `-H g`.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Negated, size-normalized similarity over the flattened pose.
struct PoseProblem<'a, 'b> {
    objective: &'b Objective<'a>,
    scale: f64,
    anchor: Vec<f64>,
    continuity_weight: f64,
}

impl Problem for PoseProblem<'_, '_> {
    fn evaluate(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let pose = Pose::from_slice(x).ok()?;
        let (e, grad) = self.objective.value_and_gradient(&pose).ok()?;
        let mut f = -e * self.scale;
        let mut g: Vec<f64> = grad.0.iter().map(|v| -v * self.scale).collect();
        if self.continuity_weight > 0.0 {
            for ((gi, xi), ai) in g.iter_mut().zip(x).zip(&self.anchor) {
                let d = xi - ai;
                f += self.continuity_weight * d * d;
                *gi += 2.0 * self.continuity_weight * d;
            }
        }
        Some((f, g))
    }

    fn canonicalize(&self, x: &mut [f64], g: &mut [f64]) {
        // with a continuity penalty the objective is not scale invariant
        if self.continuity_weight > 0.0 {
            return;
        }
        for (xq, gq) in x[3..].chunks_exact_mut(4).zip(g[3..].chunks_exact_mut(4)) {
            let n = xq.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                xq.iter_mut().for_each(|v| *v /= n);
                gq.iter_mut().for_each(|v| *v *= n);
            }
        }
    }
}

/// Maximizes the similarity between `template` and `data` starting at `init`.
///
/// Precisions are posed at `init` (and, with `precision_refreshes > 0`,
/// re-posed at each round's result). Errors are returned only for invalid
/// inputs; optimizer trouble is reported through the diagnostics.
pub fn fit_pose(template: &GSoGTemplate, data: &SoG, init: &Pose, settings: &OptimizerSettings) -> Result<FitResult> {
    settings.validate()?;
    init.check_for(template.skeleton())?;
    let options = SimilarityOptions {
        parallel: settings.parallel,
        ..Default::default()
    };
    let mut objective = Objective::new(template, data, init)?.with_options(options);
    let scale = 1.0 / (template.len() as f64 * data.len() as f64);
    let anchor = init.to_vec();
    let mut x = anchor.clone();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut evaluations = 0;
    let mut termination = Termination::MaxIterations;

    for round in 0..=settings.precision_refreshes {
        if round > 0 {
            objective.refresh_precisions(&Pose::from_slice(&x)?)?;
        }
        let problem = PoseProblem {
            objective: &objective,
            scale,
            anchor: anchor.clone(),
            continuity_weight: settings.continuity_weight,
        };
        let budget = OptimizerSettings {
            max_iterations: settings.max_iterations.saturating_sub(iterations).max(1),
            ..*settings
        };
        let min = minimize(&problem, &x, &budget)?;
        let moved = min.x.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        trace.extend(min.trace.iter().skip(usize::from(round > 0)).map(|f| -f / scale));
        iterations += min.iterations;
        evaluations += min.evaluations;
        termination = min.termination;
        x = min.x;
        debug!(
            "fit round {round}: {} iterations, E = {:.6e}, {:?}",
            min.iterations,
            -min.value / scale,
            termination
        );
        if iterations >= settings.max_iterations || moved <= settings.step_tolerance {
            break;
        }
    }
    if termination.is_flagged() {
        warn!("pose fit ended with {termination:?} after {iterations} iterations");
    }
    let mut pose = Pose::from_slice(&x)?;
    if settings.continuity_weight == 0.0 {
        pose = pose.normalized()?;
    }
    Ok(FitResult {
        pose,
        diagnostics: FitDiagnostics {
            objective_trace: trace,
            iterations,
            evaluations,
            termination,
            message: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingState {
    pub current_pose: Pose,
    pub frame_index: usize,
    pub last_objective: f64,
    pub iteration_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub poses: Vec<Pose>,
    pub diagnostics: Vec<FitDiagnostics>,
}

/// Fits every frame in order, initializing each from the previous result.
/// Frames without data (`None`) are flagged and carry the previous pose.
pub fn track_sequence(
    template: &GSoGTemplate,
    frames: &[Option<SoG>],
    init: &Pose,
    settings: &OptimizerSettings,
) -> Result<TrackResult> {
    if frames.is_empty() {
        return Err(GsogError::InvalidArgument("no frames to track".into()));
    }
    settings.validate()?;
    init.check_for(template.skeleton())?;
    let mut state = TrackingState {
        current_pose: init.clone(),
        frame_index: 0,
        last_objective: f64::NAN,
        iteration_count: 0,
    };
    let mut out = TrackResult {
        poses: Vec::with_capacity(frames.len()),
        diagnostics: Vec::with_capacity(frames.len()),
    };
    for (k, frame) in frames.iter().enumerate() {
        state.frame_index = k;
        let diagnostics = match frame {
            None => {
                warn!("frame {k}: no data, keeping previous pose");
                FitDiagnostics {
                    objective_trace: vec![],
                    iterations: 0,
                    evaluations: 0,
                    termination: Termination::EmptyData,
                    message: Some("frame has no data".into()),
                }
            }
            Some(data) => match fit_pose(template, data, &state.current_pose, settings) {
                Ok(fit) => {
                    state.current_pose = fit.pose;
                    fit.diagnostics
                }
                Err(e) => {
                    warn!("frame {k}: {e}");
                    FitDiagnostics {
                        objective_trace: vec![],
                        iterations: 0,
                        evaluations: 0,
                        termination: Termination::Failed,
                        message: Some(e.to_string()),
                    }
                }
            },
        };
        state.last_objective = diagnostics.final_objective();
        state.iteration_count += diagnostics.iterations;
        out.poses.push(state.current_pose.clone());
        out.diagnostics.push(diagnostics);
    }
    Ok(out)
}
