use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::PreferenceWeights;

/// A terminal reward on data space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RewardFn {
    /// `coef * x[axis]`
    Axis {
        axis: usize,
        #[serde(default = "one")]
        coef: f64,
    },
    /// `coef . x`
    Linear { coef: Vec<f64> },
    /// `-|x - target|^2`
    Radial { target: Vec<f64> },
    /// `tanh(sharpness * (normal . x - offset))`
    Halfspace {
        normal: Vec<f64>,
        #[serde(default)]
        offset: f64,
        #[serde(default = "one")]
        sharpness: f64,
    },
    /// `sum_i weights[i] * terms[i](x)`
    Weighted {
        terms: Vec<RewardFn>,
        weights: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

fn dot(a: &[f64], x: &[f64]) -> Result<f64> {
    if a.len() != x.len() {
        return Err(Error::dim("reward input", a.len(), x.len()));
    }
    Ok(a.iter().zip(x).map(|(a, b)| a * b).sum())
}

impl RewardFn {
    pub fn axis(axis: usize) -> Self {
        RewardFn::Axis { axis, coef: 1.0 }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            RewardFn::Axis { axis, coef } => x
                .get(*axis)
                .map(|v| coef * v)
                .ok_or_else(|| Error::dim("axis reward input", axis + 1, x.len())),
            RewardFn::Linear { coef } => dot(coef, x),
            RewardFn::Radial { target } => {
                if target.len() != x.len() {
                    return Err(Error::dim("reward input", target.len(), x.len()));
                }
                Ok(-target
                    .iter()
                    .zip(x)
                    .map(|(t, v)| (v - t) * (v - t))
                    .sum::<f64>())
            }
            RewardFn::Halfspace {
                normal,
                offset,
                sharpness,
            } => Ok((sharpness * (dot(normal, x)? - offset)).tanh()),
            RewardFn::Weighted { terms, weights } => {
                let mut acc = 0.0;
                for (r, w) in terms.iter().zip(weights) {
                    if *w != 0.0 {
                        acc += w * r.eval(x)?;
                    }
                }
                Ok(acc)
            }
        }
    }

    pub fn eval_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.eval(x)).collect()
    }

    /// The coefficient vector if the reward is linear in `x`.
    pub fn linear_coefficients(&self, dim: usize) -> Option<Vec<f64>> {
        match self {
            RewardFn::Axis { axis, coef } if *axis < dim => {
                let mut c = vec![0.0; dim];
                c[*axis] = *coef;
                Some(c)
            }
            RewardFn::Linear { coef } if coef.len() == dim => Some(coef.clone()),
            RewardFn::Weighted { terms, weights } => {
                let mut c = vec![0.0; dim];
                for (r, w) in terms.iter().zip(weights) {
                    for (ci, ri) in c.iter_mut().zip(r.linear_coefficients(dim)?) {
                        *ci += w * ri;
                    }
                }
                Some(c)
            }
            _ => None,
        }
    }
}

/// `r^w = sum_i w_i r_i`.
pub fn weighted_reward(rewards: &[RewardFn], w: &PreferenceWeights) -> Result<RewardFn> {
    if rewards.len() != w.len() {
        return Err(Error::dim("weighted reward", rewards.len(), w.len()));
    }
    Ok(RewardFn::Weighted {
        terms: rewards.to_vec(),
        weights: w.as_slice().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn kinds_evaluate() {
        let x = [0.5, -2.0];
        assert_eq!(RewardFn::axis(1).eval(&x).unwrap(), -2.0);
        assert_eq!(
            RewardFn::Linear {
                coef: vec![2.0, 1.0]
            }
            .eval(&x)
            .unwrap(),
            -1.0
        );
        assert_eq!(
            RewardFn::Radial {
                target: vec![0.5, 0.0]
            }
            .eval(&x)
            .unwrap(),
            -4.0
        );
        let h = RewardFn::Halfspace {
            normal: vec![1.0, 0.0],
            offset: 0.5,
            sharpness: 3.0,
        };
        assert_eq!(h.eval(&x).unwrap(), 0.0);
        assert!(RewardFn::axis(2).eval(&x).is_err());
        assert!(RewardFn::Linear { coef: vec![1.0] }.eval(&x).is_err());
    }

    #[test]
    fn vertex_weight_selects_reward() {
        let rs = [
            RewardFn::axis(0),
            RewardFn::Radial {
                target: vec![1.0, 1.0],
            },
        ];
        let mut r = rng::stream(1, 0);
        for i in 0..2 {
            let rw = weighted_reward(&rs, &PreferenceWeights::vertex(2, i).unwrap()).unwrap();
            for _ in 0..50 {
                let x = rng::normal_vec(&mut r, 2);
                assert_eq!(rw.eval(&x).unwrap(), rs[i].eval(&x).unwrap());
            }
        }
    }

    #[test]
    fn opposite_rewards_cancel() {
        let rs = [
            RewardFn::Linear {
                coef: vec![1.5, -0.5],
            },
            RewardFn::Linear {
                coef: vec![-1.5, 0.5],
            },
        ];
        let rw = weighted_reward(&rs, &PreferenceWeights::pair(0.5).unwrap()).unwrap();
        let mut r = rng::stream(2, 0);
        for _ in 0..50 {
            assert_eq!(rw.eval(&rng::normal_vec(&mut r, 2)).unwrap(), 0.0);
        }
    }

    #[test]
    fn weighted_matches_naive_sum() {
        let rs = [
            RewardFn::axis(0),
            RewardFn::Radial {
                target: vec![0.3, -0.2],
            },
            RewardFn::Halfspace {
                normal: vec![0.6, 0.8],
                offset: 0.1,
                sharpness: 2.0,
            },
        ];
        let mut r = rng::stream(3, 0);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..3).map(|_| r.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let w = PreferenceWeights::new(raw.iter().map(|v| v / s).collect()).unwrap();
            let x = rng::normal_vec(&mut r, 2);
            let naive: f64 = (0..3)
                .map(|i| w.as_slice()[i] * rs[i].eval(&x).unwrap())
                .sum();
            let got = weighted_reward(&rs, &w).unwrap().eval(&x).unwrap();
            assert!((got - naive).abs() <= 1e-15 * naive.abs().max(1.0));
        }
        assert!(weighted_reward(&rs[..2], &PreferenceWeights::pair(0.5).unwrap()).is_ok());
        assert!(weighted_reward(&rs, &PreferenceWeights::pair(0.5).unwrap()).is_err());
    }

    #[test]
    fn linear_coefficients() {
        let rs = [RewardFn::axis(0), RewardFn::axis(1)];
        let rw = weighted_reward(&rs, &PreferenceWeights::pair(0.25).unwrap()).unwrap();
        assert_eq!(rw.linear_coefficients(2), Some(vec![0.25, 0.75]));
        assert_eq!(
            RewardFn::Radial { target: vec![0.0] }.linear_coefficients(1),
            None
        );
    }

    #[test]
    fn toml_round_trip() {
        let r: RewardFn = toml::from_str("kind = \"axis\"\naxis = 1\n").unwrap();
        assert_eq!(r, RewardFn::axis(1));
        assert!(toml::from_str::<RewardFn>("kind = \"axis\"\naxis = 1\nbogus = 2\n").is_err());
    }
}
