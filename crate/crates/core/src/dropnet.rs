//! Drop-net: per-layer stochastic choice between two attention branches.
//!
//! During training each layer draws `U ~ Uniform[0,1]` once per iteration.
//! `U < p/2` keeps only the first branch, `U > 1 - p/2` only the second, and
//! anything in between averages both. At inference the expectation, a plain
//! average, is used.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    First,
    Second,
    Both,
}

fn check_rate(p_net: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p_net) {
        return Err(invalid(format!("drop-net rate {p_net} outside [0, 1]")));
    }
    Ok(())
}

pub fn select_branch(u: f64, p_net: f64) -> Result<Branch> {
    check_rate(p_net)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid(format!("drop-net draw {u} outside [0, 1]")));
    }
    Ok(if u < p_net / 2.0 {
        Branch::First
    } else if u > 1.0 - p_net / 2.0 {
        Branch::Second
    } else {
        Branch::Both
    })
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "drop-net combine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn average(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) * 0.5).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn combine_train(a: &Tensor, b: &Tensor, u: f64, p_net: f64) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok(match select_branch(u, p_net)? {
        Branch::First => a.clone(),
        Branch::Second => b.clone(),
        Branch::Both => average(a, b),
    })
}

pub fn combine_eval(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok(average(a, b))
}

/// Tape version of the combinator. `Branch::Both` is also the eval path.
pub fn combine(g: &mut Graph, a: Var, b: Var, branch: Branch) -> Result<Var> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Shape {
            op: "drop-net combine",
            lhs: g.value(a).shape().to_vec(),
            rhs: g.value(b).shape().to_vec(),
        });
    }
    Ok(match branch {
        Branch::First => a,
        Branch::Second => b,
        Branch::Both => {
            let s = g.add(a, b)?;
            g.scale(s, 0.5)
        }
    })
}

/// One iteration's draws: one per encoder layer and one per decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DropNetSample {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl DropNetSample {
    /// Independent draws for each stack, or one draw per layer index reused
    /// by both stacks when `shared` is set.
    pub fn draw<R: Rng + ?Sized>(layers: usize, shared: bool, rng: &mut R) -> Self {
        let encoder: Vec<f64> = (0..layers).map(|_| rng.gen::<f64>()).collect();
        let decoder = if shared {
            encoder.clone()
        } else {
            (0..layers).map(|_| rng.gen::<f64>()).collect()
        };
        DropNetSample { encoder, decoder }
    }

    /// Every layer of both stacks uses the same fixed draw.
    pub fn fixed(layers: usize, u: f64) -> Self {
        DropNetSample {
            encoder: vec![u; layers],
            decoder: vec![u; layers],
        }
    }

    pub fn encoder_branch(&self, layer: usize, p_net: f64) -> Result<Branch> {
        let u = *self
            .encoder
            .get(layer)
            .ok_or_else(|| invalid(format!("no drop-net draw for encoder layer {layer}")))?;
        select_branch(u, p_net)
    }

    pub fn decoder_branch(&self, layer: usize, p_net: f64) -> Result<Branch> {
        let u = *self
            .decoder
            .get(layer)
            .ok_or_else(|| invalid(format!("no drop-net draw for decoder layer {layer}")))?;
        select_branch(u, p_net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn zero_rate_always_averages() {
        let (a, b) = (v(&[1.0, 3.0]), v(&[2.0, -1.0]));
        for u in [0.0, 0.1, 0.5, 0.99, 1.0] {
            let out = combine_train(&a, &b, u, 0.0).unwrap();
            assert!(out.bit_eq(&combine_eval(&a, &b).unwrap()));
        }
    }

    #[test]
    fn full_rate_picks_one_branch() {
        let (a, b) = (v(&[1.0]), v(&[2.0]));
        assert_eq!(combine_train(&a, &b, 0.2, 1.0).unwrap(), a);
        assert_eq!(combine_train(&a, &b, 0.9, 1.0).unwrap(), b);
    }

    #[test]
    fn eval_examples() {
        let x = v(&[0.25, -4.0]);
        assert_eq!(combine_eval(&x, &x).unwrap(), x);
        assert_eq!(combine_eval(&v(&[2.0, 0.0]), &v(&[0.0, 2.0])).unwrap(), v(&[1.0, 1.0]));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(combine_eval(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
        assert!(combine_train(&v(&[1.0]), &v(&[1.0]), 0.5, 1.5).is_err());
        assert!(combine_train(&v(&[1.0]), &v(&[1.0]), -0.1, 0.5).is_err());
    }

    #[test]
    fn first_only_frequency_at_point_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| select_branch(rng.gen::<f64>(), 0.4).unwrap() == Branch::First)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.2).abs() <= 0.005, "freq {freq}");
    }

    #[test]
    fn shared_draws_mirror_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = DropNetSample::draw(3, true, &mut rng);
        assert_eq!(s.encoder, s.decoder);
        let s = DropNetSample::draw(3, false, &mut rng);
        assert_ne!(s.encoder, s.decoder);
    }
}
