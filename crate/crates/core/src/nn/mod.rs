//! Minimal dense layers with tape-based reverse-mode gradients.

mod array;
pub mod checkpoint;
mod params;
mod tape;

pub use array::Array;
pub use checkpoint::{load_into, read_checkpoint, write_checkpoint, CheckpointFile};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, silu, softplus, Tape, Var, LAYER_NORM_EPS, SIGMA_FLOOR};

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` over every parameter, compared with the tape.
    fn check_gradients(
        store: &mut ParamStore,
        f: &dyn Fn(&mut Tape) -> Var,
        tol: f64,
    ) -> f64 {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss).unwrap()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..store.len() {
            let id = ParamId(pi);
            for k in 0..store.get(id).value.len() {
                let orig = store.get(id).value.data()[k];
                store.get_mut(id).value.data_mut()[k] = orig + h;
                let plus = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.value(l).item()
                };
                store.get_mut(id).value.data_mut()[k] = orig - h;
                let minus = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.value(l).item()
                };
                store.get_mut(id).value.data_mut()[k] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = analytic.get(id).data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= tol, "worst relative gradient error {worst:e}");
        worst
    }

    #[test]
    fn identity_linear_and_bias() {
        let mut store = ParamStore::new();
        let mut eye = Array::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = store.add("w", eye).unwrap();
        let b = store.add("b", Array::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Array::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let wv = tape.param(w);
        let y = tape.linear(x, wv).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let zero = tape.input(Array::zeros(&[2, 3]));
        let y0 = tape.linear(zero, wv).unwrap();
        let bv = tape.param(b);
        let yb = tape.add_bias(y0, bv).unwrap();
        assert_eq!(tape.value(yb).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array::zeros(&[2, 3])).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Array::zeros(&[4, 2]));
        let wv = tape.param(w);
        assert!(matches!(tape.linear(x, wv), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("w", random(&[4, 3], &mut rng)).unwrap();
        let x = random(&[5, 3], &mut rng);
        // d sum(x W^T) / dW[o, c] = sum_r x[r, c]
        let grads = {
            let mut tape = Tape::new(&store);
            let xi = tape.input(x.clone());
            let w = tape.param(ParamId(0));
            let y = tape.linear(xi, w).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap()
        };
        for o in 0..4 {
            for c in 0..3 {
                let expect: f64 = (0..5).map(|r| x.data()[r * 3 + c]).sum();
                assert!((grads.0[0].data()[o * 3 + c] - expect).abs() < 1e-12);
            }
        }
        check_gradients(
            &mut store,
            &|t| {
                let xi = t.input(x.clone());
                let w = t.param(ParamId(0));
                let y = t.linear(xi, w).unwrap();
                t.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn block_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add("w", random(&[3, 6], &mut rng)).unwrap();
        let x = random(&[4, 2], &mut rng);
        let y = random(&[4, 3], &mut rng);
        check_gradients(
            &mut store,
            &|t| {
                let xi = t.input(x.clone());
                let w = t.param(ParamId(0));
                let a = t.linear_block(xi, w, 2, 2).unwrap();
                t.mse_loss(a, y.clone()).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.731059).abs() < 1e-6);
        // derivative at zero is sigmoid(0) = 0.5
        let h = 1e-6;
        let d = (silu(h) - silu(-h)) / (2.0 * h);
        assert!((d - 0.5).abs() < 1e-9);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Array::zeros(&[1, 1]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(40.0) - 40.0).abs() < 1e-15);
        assert!(softplus(1e308).is_finite());
        assert!(softplus(-700.0) > 0.0);
        assert!(softplus(-1e308) >= 0.0);
    }

    #[test]
    fn layer_norm_basics() {
        let mut store = ParamStore::new();
        let g = store.add("g", Array::filled(&[4], 1.0)).unwrap();
        let b = store.add("b", Array::zeros(&[4])).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(
            Array::from_vec(&[2, 4], vec![3., 3., 3., 3., -20., 1., 7., 40.]).unwrap(),
        );
        let (gv, bv) = (tape.param(g), tape.param(b));
        let y = tape.layer_norm(x, gv, bv).unwrap();
        let out = tape.value(y);
        assert!(out.row(0).iter().all(|&v| v == 0.0));
        let row = out.row(1);
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        // input variance is 498.1875, so the eps shift is ~2e-8 here
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("g", random(&[5], &mut rng)).unwrap();
        store.add("b", random(&[5], &mut rng)).unwrap();
        store.add("w", random(&[5, 5], &mut rng)).unwrap();
        let x = random(&[3, 5], &mut rng);
        let y = random(&[3, 5], &mut rng);
        check_gradients(
            &mut store,
            &|t| {
                let xi = t.input(x.clone());
                let w = t.param(ParamId(2));
                let h = t.linear(xi, w).unwrap();
                let (g, b) = (t.param(ParamId(0)), t.param(ParamId(1)));
                let n = t.layer_norm(h, g, b).unwrap();
                t.mse_loss(n, y.clone()).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn composite_gradients() {
        // exercises gather, scatter, div, mul, sigmoid, softplus, scale and the peak head
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("table", random(&[3, 3], &mut rng)).unwrap();
        store.add("bias", random(&[3], &mut rng)).unwrap();
        let target = random(&[2, 3], &mut rng);
        let gather_idx: Rc<[usize]> = Rc::from(vec![0, 2, 2, 1, 0]);
        let scatter_idx: Rc<[usize]> = Rc::from(vec![1, 0, 1, 1, 0]);
        check_gradients(
            &mut store,
            &|t| {
                let tab = t.param(ParamId(0));
                let rows = t.gather(tab, gather_idx.clone()).unwrap();
                let s = t.sigmoid(rows);
                let denom = t.scatter_add(s, scatter_idx.clone(), 2).unwrap();
                let denom = t.add_scalar(denom, 1e-9);
                let back = t.gather(denom, scatter_idx.clone()).unwrap();
                let gate = t.div(s, back).unwrap();
                let m = t.mul(gate, rows).unwrap();
                let sp = t.softplus(m);
                let agg = t.scatter_add(sp, scatter_idx.clone(), 2).unwrap();
                let agg = t.scale(agg, 0.5);
                let b = t.param(ParamId(1));
                let raw = t.add_bias(agg, b).unwrap();
                let raw = t.silu(raw);
                let out = t.peak_head(raw).unwrap();
                t.mse_loss(out, target.clone()).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Array::filled(&[2, 3], 0.25)).unwrap();
        let mut tape = Tape::new(&store);
        let p = tape.param(id);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(id).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_errors() {
        let mut store = ParamStore::new();
        let id = store.add("p", Array::filled(&[2], 1.0)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Array::filled(&[2], 1.0));
        let s = tape.sum(x);
        assert!(tape.backward(s).is_err());
        let p = tape.param(id);
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        store.add("w", random(&[4, 4], &mut rng)).unwrap();
        let x = random(&[6, 4], &mut rng);
        let run = || {
            let mut t = Tape::new(&store);
            let xi = t.input(x.clone());
            let w = t.param(ParamId(0));
            let y = t.linear(xi, w).unwrap();
            let y = t.silu(y);
            let s = t.sum(y);
            t.backward(s).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.0[0].data().iter().zip(b.0[0].data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
