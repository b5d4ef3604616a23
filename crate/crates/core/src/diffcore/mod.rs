//! Minimal reverse-mode differentiation over rank-2 `f64` tensors.
//!
//! A [`Graph`] records every operation eagerly, so a node's value is known as
//! soon as it is created and the recording order doubles as a topological
//! order for the reverse pass. Binary elementwise operations broadcast `r×1`,
//! `1×c` and `1×1` operands. [`Graph::backward`] may be called several times
//! on one graph (once per objective); each call starts from zero.
//!
//! ```
//! use stockrank::diffcore::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! assert_eq!(y.item(), 9.0);
//! assert_eq!(g.backward(y).unwrap().get(x).item(), 6.0);
//! ```

mod check;
mod graph;
mod tensor;

pub use check::check_gradient;
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_backward() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        assert_eq!(y.item(), 9.0);
        assert_eq!(g.backward(y).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        assert_eq!(g.backward(y).unwrap().get(x).item(), 0.25);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.scalar(7.0).exp();
        let _unused = x.scale(2.0);
        assert_eq!(g.backward(c).unwrap().get(x).item(), 0.0);
    }

    #[test]
    fn matmul_shapes_and_mismatch_message() {
        let g = Graph::new();
        let a = g.param(Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.param(Tensor::column(vec![1., 1., 1.]));
        assert_eq!(a.matmul(b).unwrap().shape(), (2, 1));
        let err = b.matmul(a).unwrap_err().to_string();
        assert!(err.contains("(3, 1)") && err.contains("(2, 3)"), "{err}");
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::column(vec![1.0, 2.0]));
        assert!(g.backward(x.exp()).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x  =>  dy/dx = 2x + 3
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().add(x.scale(3.0)).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).item(), 7.0);
    }

    #[test]
    fn backward_is_linear_in_the_objective() {
        let g = Graph::new();
        let x = g.param(Tensor::column(vec![0.3, -1.2, 2.0]));
        let a = x.tanh().sum();
        let b = x.powf(2.0).mean();
        let both = a.add(b).unwrap();
        let ga = g.backward(a).unwrap().get(x);
        let gb = g.backward(b).unwrap().get(x);
        let gab = g.backward(both).unwrap().get(x);
        for i in 0..3 {
            assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let g = Graph::new();
            let w = g.param(Tensor::from_vec(2, 2, vec![0.1, -0.4, 0.7, 0.2]).unwrap());
            let x = g.constant(Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
            let y = x.matmul(w).unwrap().sigmoid().log().sum();
            (y.item(), g.backward(y).unwrap().get(w).into_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn row_max_routes_gradient_to_argmax() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(2, 3, vec![1., 5., 2., 7., 0., 7.]).unwrap());
        let m = x.row_max();
        assert_eq!(m.value().data(), &[5.0, 7.0]);
        let grad = g.backward(m.sum()).unwrap().get(x);
        assert_eq!(grad.data(), &[0., 1., 0., 1., 0., 0.]);
        let top = x.max();
        assert_eq!(top.item(), 7.0);
    }

    #[test]
    fn select_splits_gradient() {
        let g = Graph::new();
        let a = g.param(Tensor::column(vec![1., 2., 3.]));
        let b = g.param(Tensor::column(vec![10., 20., 30.]));
        let s = a.select(&[true, false, true], b).unwrap();
        assert_eq!(s.value().data(), &[1., 20., 3.]);
        let grads = g.backward(s.sum()).unwrap();
        assert_eq!(grads.get(a).data(), &[1., 0., 1.]);
        assert_eq!(grads.get(b).data(), &[0., 1., 0.]);
    }

    #[test]
    fn zero_function_check_is_exact() {
        let err = check_gradient(
            |g, x| x.scale(0.0).sum().add(g.scalar(0.0)),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_check_is_tight() {
        let err = check_gradient(
            |_, x| x.mul(x)?.scale(0.5).sum().add(x.sum()),
            &[0.7, -3.0, 12.5],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_function_is_a_numeric_error() {
        let res = check_gradient(|_, x| Ok(x.log().sum()), &[-1.0], 1e-5);
        assert!(matches!(res, Err(crate::Error::Numeric(_))));
    }

    /// Each primitive against central differences at several random points.
    #[test]
    fn primitives_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        type Scalar = Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> crate::Result<Var<'g>>>;
        let cases: Vec<(&str, Scalar)> = vec![
            ("exp", Box::new(|_, x| Ok(x.exp().sum()))),
            ("log", Box::new(|_, x| Ok(x.mul(x)?.shift(1.0).log().sum()))),
            ("tanh", Box::new(|_, x| Ok(x.tanh().sum()))),
            ("sigmoid", Box::new(|_, x| Ok(x.sigmoid().mul(x)?.sum()))),
            (
                "powf",
                Box::new(|_, x| Ok(x.mul(x)?.shift(0.5).powf(1.5).sum())),
            ),
            (
                "div",
                Box::new(|_, x| Ok(x.div(x.mul(x)?.shift(2.0))?.sum())),
            ),
            (
                "sub-mean",
                Box::new(|_, x| Ok(x.sub(x.tanh())?.powf(2.0).mean())),
            ),
            (
                "matmul-transpose",
                Box::new(|_, x| Ok(x.matmul(x.transpose())?.sigmoid().sum())),
            ),
            (
                "broadcast",
                Box::new(|_, x| Ok(x.sub(x.transpose())?.sigmoid().row_sums().powf(2.0).sum())),
            ),
            (
                "col_sums",
                Box::new(|_, x| Ok(x.transpose().col_sums().tanh().sum())),
            ),
            ("max", Box::new(|_, x| x.max().add(x.mean()))),
            (
                "softmax",
                Box::new(|_, x| {
                    let e = x.exp();
                    let p = e.div(e.sum())?;
                    Ok(p.mul(x)?.sum())
                }),
            ),
        ];
        for (name, f) in &cases {
            for _ in 0..10 {
                let p: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let err = check_gradient(f, &p, 1e-6).unwrap();
                assert!(err < 1e-4, "{name} at {p:?}: {err}");
            }
        }
    }
}
