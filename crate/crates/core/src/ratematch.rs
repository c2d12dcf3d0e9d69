//! Search for the trade-off `lambda` whose fine-tuned codec hits a target
//! mean bitrate.
//!
//! The search probes the starting lambda, expands geometrically until the
//! target is bracketed, then bisects in log-lambda. Whether bitrate rises
//! or falls with lambda depends on which side of the objective lambda
//! multiplies, so the direction is read off the first two distinct probes
//! and every later probe must agree with it.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RateMatchError {
    #[error("unreachable tolerance {0}: must be positive")]
    UnreachableTolerance(f64),
    #[error("invalid rate-match input: {0}")]
    Input(String),
    #[error("non-monotone or out-of-range rate response after {} probes", .trace.len())]
    NoBracket { trace: Vec<Probe> },
    #[error("non-monotone or out-of-range rate response: bpp {bpp} at lambda {lambda} breaks the {direction:?} trend")]
    NonMonotone {
        lambda: f64,
        bpp: f64,
        direction: RateDirection,
        trace: Vec<Probe>,
    },
    #[error("no lambda within tolerance after {iterations} bisections; best probe lambda {} bpp {}", .best.lambda, .best.bpp)]
    NotConverged { iterations: usize, best: Probe, trace: Vec<Probe> },
    #[error("probe at lambda {lambda} failed: {message}")]
    Runner { lambda: f64, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub lambda: f64,
    pub bpp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateDirection {
    /// Bitrate grows with lambda.
    Increasing,
    /// Bitrate shrinks as lambda grows.
    Decreasing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateMatchConfig {
    /// Allowed `|bpp - target| / target`.
    pub tol: f64,
    /// Bisection steps after the bracket is found.
    pub max_iter: usize,
    /// Bracket expansions before giving up.
    pub max_expansions: usize,
    /// Ratio between successive expansion probes.
    pub expansion: f64,
}

impl Default for RateMatchConfig {
    fn default() -> Self {
        Self {
            tol: 0.01,
            max_iter: 12,
            max_expansions: 8,
            expansion: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateMatchResult {
    pub lambda_star: f64,
    pub achieved_bpp: f64,
    pub target_bpp: f64,
    /// Signed `(achieved - target) / target`.
    pub deviation: f64,
    /// Bisection steps used; zero when a bracketing probe already matched.
    pub iterations: usize,
    pub direction: Option<RateDirection>,
    /// Every probe in order.
    pub trace: Vec<Probe>,
}

fn deviation(bpp: f64, target: f64) -> f64 {
    (bpp - target) / target
}

struct Search<'a, F> {
    runner: F,
    target: f64,
    tol: f64,
    trace: &'a mut Vec<Probe>,
}

impl<F, E> Search<'_, F>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: std::fmt::Display,
{
    fn probe(&mut self, lambda: f64) -> Result<Probe, RateMatchError> {
        let bpp = (self.runner)(lambda).map_err(|e| RateMatchError::Runner {
            lambda,
            message: e.to_string(),
        })?;
        if !bpp.is_finite() || bpp < 0.0 {
            return Err(RateMatchError::Runner {
                lambda,
                message: format!("runner returned bpp {bpp}"),
            });
        }
        log::info!("rate match probe: lambda {lambda:.6e} -> {bpp:.5} bpp (target {:.5})", self.target);
        let p = Probe { lambda, bpp };
        self.trace.push(p);
        Ok(p)
    }

    fn hit(&self, p: Probe) -> bool {
        deviation(p.bpp, self.target).abs() <= self.tol
    }
}

/// Finds lambda with mean bpp within `cfg.tol` of `target_bpp`, starting
/// from `lambda0`. `runner` maps a lambda to the mean bpp of the codec
/// fine-tuned at that lambda and must be deterministic.
pub fn match_bitrate<F, E>(runner: F, target_bpp: f64, lambda0: f64, cfg: &RateMatchConfig) -> Result<RateMatchResult, RateMatchError>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: std::fmt::Display,
{
    if !(cfg.tol > 0.0) {
        return Err(RateMatchError::UnreachableTolerance(cfg.tol));
    }
    if !(target_bpp > 0.0 && target_bpp.is_finite()) {
        return Err(RateMatchError::Input(format!("target bpp {target_bpp} must be positive")));
    }
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(RateMatchError::Input(format!("starting lambda {lambda0} must be positive")));
    }
    if !(cfg.expansion > 1.0) {
        return Err(RateMatchError::Input(format!("expansion {} must exceed 1", cfg.expansion)));
    }
    let mut trace = Vec::new();
    let mut s = Search {
        runner,
        target: target_bpp,
        tol: cfg.tol,
        trace: &mut trace,
    };
    let done = |p: Probe, iterations: usize, direction: Option<RateDirection>, trace: Vec<Probe>| RateMatchResult {
        lambda_star: p.lambda,
        achieved_bpp: p.bpp,
        target_bpp,
        deviation: deviation(p.bpp, target_bpp),
        iterations,
        direction,
        trace,
    };

    let p0 = s.probe(lambda0)?;
    if s.hit(p0) {
        return Ok(done(p0, 0, None, trace));
    }

    // The first probe that differs from the start fixes the direction.
    let mut direction = None;
    let mut first = p0;
    let mut factor = cfg.expansion;
    for _ in 0..cfg.max_expansions {
        let p = s.probe(lambda0 * factor)?;
        if p.bpp != p0.bpp {
            direction = Some(if p.bpp > p0.bpp {
                RateDirection::Increasing
            } else {
                RateDirection::Decreasing
            });
            first = p;
            break;
        }
        factor *= cfg.expansion;
    }
    let Some(direction) = direction else {
        return Err(RateMatchError::NoBracket { trace });
    };
    if s.hit(first) {
        return Ok(done(first, 0, Some(direction), trace));
    }
    let rises = direction == RateDirection::Increasing;

    // Expand away from the start, in the direction that moves bpp toward
    // the target, until a probe lands on the far side of it.
    let need_higher = p0.bpp < target_bpp;
    let step_up = need_higher == rises;
    let beyond = |p: Probe| if need_higher { p.bpp > target_bpp } else { p.bpp < target_bpp };
    let (mut near, mut far) = (p0, None);
    if step_up {
        if beyond(first) {
            far = Some(first);
        } else {
            near = first;
        }
    }
    let mut expansions = 0;
    let far = loop {
        if let Some(f) = far {
            break f;
        }
        if expansions >= cfg.max_expansions {
            return Err(RateMatchError::NoBracket { trace });
        }
        expansions += 1;
        let lambda = if step_up {
            near.lambda * cfg.expansion
        } else {
            near.lambda / cfg.expansion
        };
        let p = s.probe(lambda)?;
        if s.hit(p) {
            return Ok(done(p, 0, Some(direction), trace));
        }
        let toward = if need_higher { p.bpp >= near.bpp } else { p.bpp <= near.bpp };
        if !toward {
            return Err(RateMatchError::NonMonotone {
                lambda: p.lambda,
                bpp: p.bpp,
                direction,
                trace,
            });
        }
        if beyond(p) {
            far = Some(p);
        } else {
            near = p;
        }
    };
    let (mut lo, mut up) = if near.lambda < far.lambda { (near, far) } else { (far, near) };

    // Bisect in log-lambda.
    let mut best = if (lo.bpp - target_bpp).abs() < (up.bpp - target_bpp).abs() {
        lo
    } else {
        up
    };
    for it in 1..=cfg.max_iter {
        let lambda = (lo.lambda.ln() * 0.5 + up.lambda.ln() * 0.5).exp();
        let p = s.probe(lambda)?;
        let inside = if rises {
            p.bpp >= lo.bpp && p.bpp <= up.bpp
        } else {
            p.bpp <= lo.bpp && p.bpp >= up.bpp
        };
        if !inside {
            return Err(RateMatchError::NonMonotone {
                lambda: p.lambda,
                bpp: p.bpp,
                direction,
                trace,
            });
        }
        if (p.bpp - target_bpp).abs() < (best.bpp - target_bpp).abs() {
            best = p;
        }
        if s.hit(p) {
            return Ok(done(p, it, Some(direction), trace));
        }
        let below_target = p.bpp < target_bpp;
        if below_target == rises {
            lo = p;
        } else {
            up = p;
        }
    }
    Err(RateMatchError::NotConverged {
        iterations: cfg.max_iter,
        best,
        trace,
    })
}
