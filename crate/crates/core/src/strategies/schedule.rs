use serde::{Deserialize, Serialize};

/// Learning-rate state carried across gradient steps and task boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_current: f64,
    pub gamma: f64,
    pub lr_min: f64,
    /// Multiplier applied after every gradient step inside a task.
    pub per_step_decay: f64,
}

impl LrSchedule {
    /// Inter-task adjustment: `lr = max(lr_min, lr * gamma)`.
    pub fn lr_adjust(self) -> Self {
        Self {
            lr_current: self.lr_min.max(self.lr_current * self.gamma),
            ..self
        }
    }

    pub fn decay_step(&mut self) {
        self.lr_current *= self.per_step_decay;
    }
}

pub fn lr_adjust(schedule: LrSchedule) -> LrSchedule {
    schedule.lr_adjust()
}
