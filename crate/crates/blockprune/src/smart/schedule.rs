//! Temperature decay schedules for the structural-search phase.
//!
//! Three families over the search-iteration index n in [0, si]:
//!
//! ```text
//! linear:       tau(n) = tau_s - n * (tau_s - tau_e) / si
//! exponential:  tau(n) = tau_s - 1 + beta^n,  beta = (tau_e - tau_s + 1)^(1/si)
//! inverse exp:  tau(n) = tau_s + 1 - beta^n,  beta = (1 + tau_s - tau_e)^(1/si)
//! ```
//!
//! Each is monotone nonincreasing with tau(0) = tau_s and tau(si) = tau_e;
//! past si the value clamps at tau_e. beta^n is evaluated as base^(n/si) so
//! the boundary values are exact in floating point.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    Linear,
    Exponential,
    InverseExponential,
}

impl ScheduleFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleFamily::Linear),
            "exponential" => Ok(ScheduleFamily::Exponential),
            "inverse_exponential" => Ok(ScheduleFamily::InverseExponential),
            other => Err(Error::Config(format!(
                "unknown schedule family '{other}' (want linear | exponential | inverse_exponential)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleFamily::Linear => "linear",
            ScheduleFamily::Exponential => "exponential",
            ScheduleFamily::InverseExponential => "inverse_exponential",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempSchedule {
    pub family: ScheduleFamily,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Total search iterations the decay is stretched over.
    pub search_iters: u64,
}

impl TempSchedule {
    pub fn new(family: ScheduleFamily, tau_start: f64, tau_end: f64, search_iters: u64) -> Result<Self> {
        if !(tau_start > tau_end && tau_end > 0.0) || !tau_start.is_finite() {
            return Err(Error::Config(format!(
                "schedule needs tau_start > tau_end > 0, got {tau_start} and {tau_end}"
            )));
        }
        if search_iters == 0 {
            return Err(Error::Config("schedule needs at least one search iteration".into()));
        }
        if family == ScheduleFamily::Exponential && tau_end - tau_start + 1.0 <= 0.0 {
            return Err(Error::Config(format!(
                "exponential schedule needs tau_end - tau_start + 1 > 0, got {}",
                tau_end - tau_start + 1.0
            )));
        }
        Ok(TempSchedule { family, tau_start, tau_end, search_iters })
    }

    pub fn value(&self, n: u64) -> f64 {
        if n >= self.search_iters {
            return self.tau_end;
        }
        let frac = n as f64 / self.search_iters as f64;
        match self.family {
            ScheduleFamily::Linear => self.tau_start * (1.0 - frac) + self.tau_end * frac,
            ScheduleFamily::Exponential => {
                self.tau_start - 1.0 + (self.tau_end - self.tau_start + 1.0).powf(frac)
            }
            ScheduleFamily::InverseExponential => {
                self.tau_start + 1.0 - (1.0 + self.tau_start - self.tau_end).powf(frac)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FAMILIES: [ScheduleFamily; 3] = [
        ScheduleFamily::Linear,
        ScheduleFamily::Exponential,
        ScheduleFamily::InverseExponential,
    ];

    #[test]
    fn linear_midpoint() {
        let s = TempSchedule::new(ScheduleFamily::Linear, 1.0, 0.0001, 10).unwrap();
        assert!((s.value(5) - 0.50005).abs() <= 1e-12);
    }

    #[test]
    fn exponential_closed_form() {
        // tau_s = 1 makes tau(n) = beta^n with beta = 0.1.
        let s = TempSchedule::new(ScheduleFamily::Exponential, 1.0, 1e-4, 4).unwrap();
        assert!((s.value(2) - 0.01).abs() <= 1e-12, "tau(2) = {}", s.value(2));
        assert!((s.value(1) - 0.1).abs() <= 1e-12);
        assert!((s.value(3) - 1e-3).abs() <= 1e-12);
    }

    #[test]
    fn boundaries_exact_for_all_families() {
        for fam in FAMILIES {
            for &(ts, te, si) in &[(1.0, 1e-4, 10u64), (0.5, 1e-5, 3), (0.9, 0.2, 1), (10.0, 9.5, 7)] {
                if fam == ScheduleFamily::Exponential && te - ts + 1.0 <= 0.0 {
                    continue;
                }
                let s = TempSchedule::new(fam, ts, te, si).unwrap();
                assert!((s.value(0) - ts).abs() <= 1e-12, "{fam:?} start");
                assert!((s.value(si) - te).abs() <= 1e-12, "{fam:?} end");
                assert_eq!(s.value(si + 5), te, "{fam:?} clamp past si");
            }
        }
    }

    #[test]
    fn monotone_nonincreasing() {
        for fam in FAMILIES {
            let s = TempSchedule::new(fam, 0.8, 1e-5, 50).unwrap();
            let mut prev = f64::INFINITY;
            for n in 0..=55 {
                let v = s.value(n);
                assert!(v <= prev + 1e-15, "{fam:?} rose at n = {n}");
                assert!(v > 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn exponential_domain_check() {
        // tau_s - tau_e >= 1 makes the base nonpositive.
        assert!(TempSchedule::new(ScheduleFamily::Exponential, 2.5, 0.5, 10).is_err());
        assert!(TempSchedule::new(ScheduleFamily::InverseExponential, 2.5, 0.5, 10).is_ok());
    }

    #[test]
    fn degenerate_params_rejected() {
        assert!(TempSchedule::new(ScheduleFamily::Linear, 0.1, 0.1, 10).is_err());
        assert!(TempSchedule::new(ScheduleFamily::Linear, 0.1, 0.2, 10).is_err());
        assert!(TempSchedule::new(ScheduleFamily::Linear, 0.1, 0.0, 10).is_err());
        assert!(TempSchedule::new(ScheduleFamily::Linear, 1.0, 0.5, 0).is_err());
    }
}
