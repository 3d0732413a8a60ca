use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: zeros with probability `rate`, `1/(1-rate)` otherwise.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let keep = T::lit(1.0 / (1.0 - rate));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn dropout_apply<T: Scalar>(t: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(t.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask::<T>(t.shape(), rate, &mut rng)?;
    let data = t.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Graph version; identity in eval mode or at rate 0.
pub fn dropout_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask::<T>(g.value(x).shape(), rate, rng)?;
    let m = g.input(mask);
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_zero_and_eval_are_identity() {
        let t = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        assert_eq!(dropout_apply(&t, 0.0, Mode::Train, 7).unwrap(), t);
        assert_eq!(dropout_apply(&t, 0.5, Mode::Eval, 7).unwrap(), t);
    }

    #[test]
    fn rate_one_rejected() {
        let t = Tensor::<f64>::zeros(&[2]);
        assert!(dropout_apply(&t, 1.0, Mode::Train, 0).is_err());
    }

    #[test]
    fn expectation_preserved_monte_carlo() {
        let n = 100_000;
        let t = Tensor::<f64>::full(&[n], 2.0);
        let out = dropout_apply(&t, 0.5, Mode::Train, 42).unwrap();
        let mean = out.sum() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }
}
