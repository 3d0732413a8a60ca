use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqtag::autodiff::{clip_global_norm, decode_checkpoint, encode_checkpoint, finite_diff_check_all, Graph, ParamStore};
use seqtag::layers::uniform_tensor;
use seqtag::{Result, Tensor};

/// Exercises every elementwise and structural op once.
fn composite_loss(store: &ParamStore<f64>, idx: &[usize]) -> Result<(f64, seqtag::autodiff::Gradients<f64>)> {
    let mut g = Graph::new(store);
    let [x, w, b, row, s, table] = ["x", "w", "b", "row", "s", "table"].map(|n| g.param(store.id(n).unwrap()));
    let h = g.linear(x, w, Some(b))?;
    let h = g.tanh(h);
    let gate = g.sigmoid(h);
    let h2 = g.mul(h, gate)?;
    let h2 = g.mul_row(h2, row)?;
    let h2 = g.scale(h2, s)?;
    let emb = g.gather(table, idx)?;
    let both = g.concat_cols(&[h2, emb])?;
    let first = g.row(both, 0)?;
    let n = g.value(both).rows();
    let rest = g.slice_rows(both, 1, n)?;
    let stacked = g.stack_rows(&[first, first])?;
    let cols = g.slice_cols(stacked, 1, 3)?;
    let sum_rest = g.sum(rest);
    let sum_cols = g.sum(cols);
    let half = g.scale_const(sum_cols, 0.5);
    let loss = g.add(sum_rest, half)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_graph_matches_finite_differences(rows in 2usize..4, inp in 1usize..4, out in 2usize..4, seed in any::<u64>(), idx in prop::collection::vec(0usize..4, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.register("x", uniform_tensor(&[rows, inp], 1.0, &mut rng)).unwrap();
        store.register("w", uniform_tensor(&[out, inp], 1.0, &mut rng)).unwrap();
        store.register("b", uniform_tensor(&[out], 1.0, &mut rng)).unwrap();
        store.register("row", uniform_tensor(&[out], 1.0, &mut rng)).unwrap();
        store.register("s", uniform_tensor(&[1], 1.0, &mut rng)).unwrap();
        store.register("table", uniform_tensor(&[4, 2], 1.0, &mut rng)).unwrap();
        let idx: Vec<usize> = idx[..rows].to_vec();
        let err = finite_diff_check_all(&mut store, 1e-6, |s| composite_loss(s, &idx)).unwrap();
        prop_assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn checkpoints_roundtrip_bit_exactly(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let mut store = ParamStore::new();
        let n = vals.len();
        store.register("a.b", Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
        store.register("scalar", Tensor::scalar(1.5)).unwrap();
        let bytes = encode_checkpoint(&store);
        let back: ParamStore<f64> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.value(back.id("a.b").unwrap()).data(), &vals[..]);
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn clipping_bounds_the_global_norm(vals in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.1f64..10.0) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::zeros(&[vals.len()])).unwrap();
        store.param_mut(id).grad = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let before = store.global_grad_norm();
        let s = clip_global_norm(&mut store, max);
        let after = store.global_grad_norm();
        prop_assert!(after <= max * (1.0 + 1e-12));
        prop_assert!(s <= 1.0);
        if before <= max {
            prop_assert_eq!(after, before);
        }
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    store.register("w", Tensor::full(&[3, 3], 0.25)).unwrap();
    let bytes = encode_checkpoint(&store);
    assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_checkpoint::<f64>(b"not a checkpoint").is_err());
}
