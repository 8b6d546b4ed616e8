//! One-dimensional corridor used to sanity-check the learner.
//!
//! The agent starts in cell 0 of `length` cells and moves left, stays or
//! moves right. Reaching the last cell pays 1 and ends the episode; so does
//! running out of time, with reward 0. The optimal return is 1.

use sfc_core::env::{Environment, Transition};

#[derive(Debug, Clone)]
pub struct Corridor {
    length: usize,
    time_limit: usize,
    pos: usize,
    t: usize,
}

impl Corridor {
    pub const OPTIMAL_RETURN: f64 = 1.0;

    pub fn new(length: usize, time_limit: usize) -> Self {
        assert!(length >= 2 && time_limit >= length - 1, "goal must be reachable");
        Self { length, time_limit, pos: 0, t: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn obs(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.length];
        v[self.pos] = 1.0;
        v
    }
}

impl Environment for Corridor {
    type Info = ();

    fn observation_len(&self) -> usize {
        self.length
    }

    fn action_heads(&self) -> Vec<usize> {
        vec![3]
    }

    fn reset(&mut self, _seed: u64) -> sfc_core::Result<Vec<f64>> {
        self.pos = 0;
        self.t = 0;
        Ok(self.obs())
    }

    fn step(&mut self, action: &[usize]) -> sfc_core::Result<Transition<()>> {
        match action {
            [0] => self.pos = self.pos.saturating_sub(1),
            [1] => {}
            [2] => self.pos = (self.pos + 1).min(self.length - 1),
            _ => {
                return Err(sfc_core::Error::ActionOutOfRange {
                    component: "move",
                    value: action.first().map_or(-1, |&a| a as i64),
                    bound: 3,
                })
            }
        }
        self.t += 1;
        let at_goal = self.pos == self.length - 1;
        Ok(Transition {
            observation: self.obs(),
            reward: if at_goal { 1.0 } else { 0.0 },
            done: at_goal || self.t >= self.time_limit,
            info: (),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walking_right_reaches_goal() {
        let mut c = Corridor::new(5, 10);
        c.reset(0).unwrap();
        let mut ret = 0.0;
        for i in 0..4 {
            let tr = c.step(&[2]).unwrap();
            ret += tr.reward;
            assert_eq!(tr.done, i == 3);
        }
        assert_eq!(ret, Corridor::OPTIMAL_RETURN);
    }

    #[test]
    fn time_limit_ends_episode() {
        let mut c = Corridor::new(5, 6);
        c.reset(0).unwrap();
        for i in 0..6 {
            let tr = c.step(&[0]).unwrap();
            assert_eq!(tr.reward, 0.0);
            assert_eq!(tr.done, i == 5);
        }
        assert!(c.step(&[3]).is_err());
    }
}
