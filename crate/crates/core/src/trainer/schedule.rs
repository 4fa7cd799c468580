use thiserror::Error;

use crate::config::{ConfigError, Section};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("unknown schedule `{0}` (known: noam, linear, constant)")]
    UnknownSchedule(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// A value that varies with the update step: the learning rate, or any
/// other hyper-parameter such as the glancing ratio.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Noam { d_model: usize, warmup: u64, factor: f64 },
    /// `total = None` spans the whole run; see [`Schedule::resolve`].
    Linear { start: f64, end: f64, total: Option<u64> },
    Constant(f64),
}

impl Schedule {
    /// Reads `class` (default `default_class`) and the class's keys.
    pub fn from_section(s: &Section<'_>, default_class: &str) -> Result<Self, ScheduleError> {
        let class = s.opt_str("class")?.unwrap_or(default_class);
        match class {
            "noam" => Ok(Schedule::Noam {
                d_model: s.req_usize("d_model")?,
                warmup: s.opt_u64("warmup")?.unwrap_or(4000).max(1),
                factor: s.f64_or("factor", 1.0)?,
            }),
            "linear" => Ok(Schedule::Linear {
                start: s.req_f64("start")?,
                end: s.req_f64("end")?,
                total: s.opt_u64("total")?,
            }),
            "constant" => Ok(Schedule::Constant(s.req_f64("value")?)),
            other => Err(ScheduleError::UnknownSchedule(other.to_string())),
        }
    }

    /// Fills an open-ended linear horizon with `max_steps`.
    pub fn resolve(&mut self, max_steps: u64) {
        if let Schedule::Linear { total: t @ None, .. } = self {
            *t = Some(max_steps.max(1));
        }
    }
}

/// Value of `schedule` at update `step` (1-based; 0 is treated as 1).
pub fn rate(schedule: &Schedule, step: u64) -> f64 {
    let s = step.max(1) as f64;
    match *schedule {
        Schedule::Noam { d_model, warmup, factor } => {
            let w = warmup as f64;
            factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
        }
        Schedule::Linear { start, end, total } => {
            let frac = match total {
                Some(t) if t > 0 => (s / t as f64).min(1.0),
                _ => 1.0,
            };
            start + (end - start) * frac
        }
        Schedule::Constant(c) => c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse;

    #[test]
    fn parses_each_class() {
        let v = parse("class: noam\nd_model: 64\nwarmup: 100").unwrap();
        let s = Schedule::from_section(&Section::new("lr", &v).unwrap(), "constant").unwrap();
        assert_eq!(s, Schedule::Noam { d_model: 64, warmup: 100, factor: 1.0 });
        let v = parse("start: 0.5\nend: 0.3").unwrap();
        let mut s = Schedule::from_section(&Section::new("g", &v).unwrap(), "linear").unwrap();
        s.resolve(10);
        assert_eq!(rate(&s, 5), 0.4);
        let v = parse("class: cosine").unwrap();
        assert!(matches!(
            Schedule::from_section(&Section::new("g", &v).unwrap(), "linear"),
            Err(ScheduleError::UnknownSchedule(_))
        ));
    }

    #[test]
    fn linear_holds_end_after_total() {
        let s = Schedule::Linear { start: 1.0, end: 0.0, total: Some(4) };
        assert_eq!(rate(&s, 8), 0.0);
    }
}
