/// Per-epoch learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// Staircase from `lr0` down to `lr_end`: equal decrements every
    /// `step_epochs`, reaching `lr_end` at `end_epoch` and holding there.
    Staircase {
        lr0: f64,
        lr_end: f64,
        step_epochs: usize,
        end_epoch: usize,
    },
    /// `lr0` for `hold_epochs`, then linear decay to zero at `total_epochs`.
    HoldThenDecay {
        lr0: f64,
        hold_epochs: usize,
        total_epochs: usize,
    },
    Constant(f64),
}

impl LrSchedule {
    pub const PAIRED: LrSchedule = LrSchedule::Staircase {
        lr0: 9e-4,
        lr_end: 2e-6,
        step_epochs: 30,
        end_epoch: 300,
    };

    pub const UNPAIRED: LrSchedule = LrSchedule::HoldThenDecay {
        lr0: 1e-4,
        hold_epochs: 100,
        total_epochs: 200,
    };

    pub fn lr(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Staircase {
                lr0,
                lr_end,
                step_epochs,
                end_epoch,
            } => {
                if end_epoch == 0 || epoch >= end_epoch {
                    return lr_end;
                }
                let stair = (epoch / step_epochs.max(1)) * step_epochs.max(1);
                lr0 - (lr0 - lr_end) * stair as f64 / end_epoch as f64
            }
            LrSchedule::HoldThenDecay {
                lr0,
                hold_epochs,
                total_epochs,
            } => {
                if epoch < hold_epochs {
                    lr0
                } else if epoch >= total_epochs {
                    0.0
                } else {
                    lr0 * (total_epochs - epoch) as f64 / (total_epochs - hold_epochs) as f64
                }
            }
            LrSchedule::Constant(lr) => lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_endpoints() {
        assert_eq!(LrSchedule::PAIRED.lr(0), 9e-4);
        assert_eq!(LrSchedule::PAIRED.lr(29), 9e-4);
        assert!(LrSchedule::PAIRED.lr(30) < 9e-4);
        assert_eq!(LrSchedule::PAIRED.lr(300), 2e-6);
        assert_eq!(LrSchedule::PAIRED.lr(499), 2e-6);
    }

    #[test]
    fn paired_is_staircase() {
        let s = LrSchedule::PAIRED;
        for e in 0..300 {
            let next = s.lr(e + 1);
            if (e + 1) % 30 == 0 {
                let step = (9e-4 - 2e-6) / 10.0;
                assert!((s.lr(e) - next - step).abs() < 1e-15, "epoch {e}");
            } else {
                assert_eq!(s.lr(e), next);
            }
        }
    }

    #[test]
    fn unpaired_midpoint() {
        let s = LrSchedule::UNPAIRED;
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(99), 1e-4);
        assert!((s.lr(150) - 0.5e-4).abs() < 1e-18);
        assert_eq!(s.lr(200), 0.0);
    }
}
