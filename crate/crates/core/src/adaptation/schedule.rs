use crate::error::{Error, Result};

/// `2 / (1 + exp(γ·m)) − 1`: zero at the start of training and approaching
/// one as progress `m` reaches 1 for negative `γ`.
pub fn lambda_schedule(m: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid("m", format!("training progress must lie in [0, 1], got {m}")));
    }
    Ok(2.0 / (1.0 + (gamma * m).exp()) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub gamma: f64,
    pub progress: f64,
    pub lambda_adv: f64,
    pub lambda_u_ratio: f64,
}

impl ScheduleState {
    pub fn at(step: u64, total_steps: u64, gamma: f64, lambda_u_ratio: f64) -> Result<Self> {
        let progress = if total_steps == 0 {
            1.0
        } else {
            (step as f64 / total_steps as f64).min(1.0)
        };
        Ok(Self {
            gamma,
            progress,
            lambda_adv: lambda_schedule(progress, gamma)?,
            lambda_u_ratio,
        })
    }

    /// Replaces the scheduled value with a constant.
    pub fn with_lambda(mut self, lambda_adv: f64) -> Self {
        self.lambda_adv = lambda_adv;
        self
    }

    pub fn lambda_u(&self) -> f64 {
        self.lambda_u_ratio * self.lambda_adv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lambda_schedule(0.0, -10.0).unwrap(), 0.0);
        assert!((lambda_schedule(1.0, -10.0).unwrap() - 0.999909).abs() < 1e-6);
        assert!((lambda_schedule(0.5, -10.0).unwrap() - 0.986614).abs() < 1e-6);
        assert!(lambda_schedule(1.5, -10.0).is_err());
        assert!(lambda_schedule(-0.1, -10.0).is_err());
    }

    #[test]
    fn state_tracks_ratio() {
        let s = ScheduleState::at(50, 100, -10.0, 0.25).unwrap();
        assert_eq!(s.progress, 0.5);
        assert!((s.lambda_u() - 0.25 * s.lambda_adv).abs() < 1e-15);
        let past_end = ScheduleState::at(150, 100, -10.0, 0.25).unwrap();
        assert_eq!(past_end.progress, 1.0);
    }
}
