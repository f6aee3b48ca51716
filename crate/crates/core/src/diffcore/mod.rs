//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] records primitive operations as they execute. Parameters enter
//! a tape through [`ParamStore::bind`], the forward pass is ordinary method
//! calls on the tape, and [`Tape::backward`] returns [`Gradients`] keyed by
//! the arrays the tape handed out.

mod array;
mod gradcheck;
mod optim;
mod params;
mod tape;

pub use array::{DiffArray, NodeId};
pub use gradcheck::{grad_check, grad_check_many, grad_check_params};
pub use optim::Adam;
pub use params::{Bound, Checkpoint, ParamStore, StoredArray, StoredValues, CHECKPOINT_FORMAT};
pub use tape::{Gradients, Tape};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Arr = DiffArray<f64>;

    fn arr(shape: &[usize], v: &[f64]) -> Arr {
        DiffArray::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Arr {
        let n = shape.iter().product();
        DiffArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let y = t.softmax(&arr(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.values(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng, -2.0, 2.0);
        let mut t = Tape::new();
        let y = t.matmul(&Arr::identity(3), &a).unwrap();
        assert_eq!(y.values(), a.values());
    }

    #[test]
    fn bilinear_center_of_two_by_two() {
        let grid = arr(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let mut t = Tape::new();
        let y = t.grid_sample(&grid, &arr(&[1, 2], &[0.5, 0.5])).unwrap();
        assert!((y.values()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_zero_padding_outside() {
        let grid = arr(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let mut t = Tape::new();
        // halfway past the right edge: half of column 1, half of padding
        let y = t.grid_sample(&grid, &arr(&[2, 2], &[1.5, 0.0, -5.0, -5.0])).unwrap();
        assert!((y.values()[0] - 0.5).abs() < 1e-15);
        assert_eq!(y.values()[1], 0.0);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::<f64>::new();
        let err = t.add(&Arr::zeros(&[2, 3]), &Arr::zeros(&[2])).unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(t.matmul(&Arr::zeros(&[2, 3]), &Arr::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::<f64>::new();
        assert!(matches!(t.ln(&arr(&[2], &[1.0, 0.0])), Err(Error::Domain { .. })));
        assert!(matches!(
            t.div(&arr(&[1], &[1.0]), &arr(&[1], &[-1.0])),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.param(&arr(&[2], &[1.0, 2.0]));
        let s = t.sum(&x).unwrap();
        t.backward(&s).unwrap();
        assert!(matches!(t.backward(&s), Err(Error::BackwardReplay)));
    }

    #[test]
    fn detached_arrays_have_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(&arr(&[2], &[1.0, 2.0]));
        let free = arr(&[2], &[5.0, 5.0]);
        let y = t.mul(&x, &free).unwrap();
        let s = t.sum(&y).unwrap();
        let g = t.backward(&s).unwrap();
        assert!(free.node().is_none());
        assert_eq!(g.get(&free).values(), &[0.0, 0.0]);
        assert_eq!(g.get(&x).values(), &[5.0, 5.0]);
        assert_eq!(g.get(&x).shape(), x.shape());
    }

    #[test]
    fn foreign_tape_arrays_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::<f64>::new();
        let x = t1.param(&arr(&[1], &[1.0]));
        assert!(t2.exp(&x).is_err());
    }

    /// Every primitive, `sum(op(x))` against central differences at random
    /// points.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        type Prim = Box<dyn Fn(&mut Tape<f64>, &Arr, &Arr) -> crate::Result<Arr>>;
        let prims: Vec<(&str, [usize; 2], Prim)> = vec![
            ("add", [3, 4], Box::new(|t, a, b| t.add(a, b))),
            ("sub", [3, 4], Box::new(|t, a, b| t.sub(a, b))),
            ("mul", [3, 4], Box::new(|t, a, b| t.mul(a, b))),
            ("div", [3, 4], Box::new(|t, a, b| {
                let d = t.exp(b)?;
                t.div(a, &d)
            })),
            ("matmul", [3, 4], Box::new(|t, a, b| {
                let bt = t.transpose(b)?;
                t.matmul(a, &bt)
            })),
            ("concat0", [3, 4], Box::new(|t, a, b| {
                let c = t.concat(&[a, b], 0)?;
                t.mul(&c, &c)
            })),
            ("concat1", [3, 4], Box::new(|t, a, b| {
                let c = t.concat(&[a, b], 1)?;
                t.mul(&c, &c)
            })),
            ("exp", [3, 4], Box::new(|t, a, _| t.exp(a))),
            ("ln", [3, 4], Box::new(|t, a, _| {
                let e = t.exp(a)?;
                let s = t.shift(&e, 0.5)?;
                t.ln(&s)
            })),
            ("abs", [3, 4], Box::new(|t, a, b| {
                let p = t.mul(a, b)?;
                t.abs(&p)
            })),
            ("relu", [3, 4], Box::new(|t, a, b| {
                let p = t.mul(a, b)?;
                t.relu(&p)
            })),
            ("softmax0", [3, 4], Box::new(|t, a, b| {
                let s = t.softmax(a, 0)?;
                t.mul(&s, b)
            })),
            ("softmax1", [3, 4], Box::new(|t, a, b| {
                let s = t.softmax(a, 1)?;
                t.mul(&s, b)
            })),
            ("sigmoid", [3, 4], Box::new(|t, a, _| t.sigmoid(a))),
            ("mean", [3, 4], Box::new(|t, a, b| {
                let p = t.mul(a, b)?;
                t.mean(&p)
            })),
            ("sum_axis", [3, 4], Box::new(|t, a, b| {
                let s = t.sum_axis(a, 1)?;
                let s2 = t.mul(&s, &s)?;
                let r = t.sum_axis(b, 0)?;
                let r2 = t.mul(&r, &r)?;
                let x = t.sum(&s2)?;
                let y = t.sum(&r2)?;
                t.add(&x, &y)
            })),
            ("broadcast", [3, 4], Box::new(|t, a, b| {
                let bb = t.broadcast(b, 2)?;
                let aa = t.broadcast(a, 2)?;
                let p = t.mul(&aa, &bb)?;
                t.mul(&p, &aa)
            })),
            ("bias_add", [3, 4], Box::new(|t, a, b| {
                let row = t.gather_rows(b, &[1])?;
                let row = t.reshape(&row, &[4])?;
                let s = t.add(a, &row)?;
                t.mul(&s, &s)
            })),
            ("expand", [3, 4], Box::new(|t, a, b| {
                let e = t.expand(a, 3)?;
                let f = t.expand(b, 3)?;
                t.mul(&e, &f)
            })),
            ("scale", [3, 4], Box::new(|t, a, b| {
                let s = t.scale(a, -2.5)?;
                t.mul(&s, b)
            })),
            ("clamp", [3, 4], Box::new(|t, a, b| {
                let c = t.clamp(a, -0.5, 0.5)?;
                t.mul(&c, b)
            })),
            ("gather", [3, 4], Box::new(|t, a, b| {
                let g = t.gather_rows(a, &[2, 0, 2])?;
                let h = t.gather_rows(b, &[0, 1, 1])?;
                t.mul(&g, &h)
            })),
            ("grid_sample", [3, 4], Box::new(|t, a, b| {
                // grid from a (3x4x1), coordinates from b's first two rows
                let grid = t.reshape(a, &[3, 4, 1])?;
                let c = t.reshape(b, &[6, 2])?;
                let c = t.scale(&c, 1.7)?;
                let c = t.shift(&c, 1.3)?;
                t.grid_sample(&grid, &c)
            })),
        ];
        for (name, shape, f) in &prims {
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let a = random(shape, &mut rng, -1.5, 1.5);
                let b = random(shape, &mut rng, -1.5, 1.5);
                let err = grad_check_many(
                    |t, xs| {
                        let y = f(t, &xs[0], &xs[1])?;
                        t.sum(&y)
                    },
                    &[a, b],
                    1e-6,
                    None,
                    0,
                )
                .unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-5, "{name}: max rel err {worst}");
        }
    }

    #[test]
    fn chained_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random(&[2, 3], &mut rng, -1.0, 1.0);
            let w = random(&[3, 3], &mut rng, -1.0, 1.0);
            let err = grad_check_many(
                |t, xs| {
                    let h = t.matmul(&xs[0], &xs[1])?;
                    let h = t.sigmoid(&h)?;
                    let h = t.softmax(&h, 1)?;
                    let h = t.shift(&h, 0.1)?;
                    let h = t.ln(&h)?;
                    t.mean(&h)
                },
                &[x, w],
                1e-6,
                None,
                0,
            )
            .unwrap();
            assert!(err < 1e-5);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = random(&[4, 4], &mut rng, -1.0, 1.0);
            let mut t = Tape::new();
            let xb = t.param(&x);
            let y = t.matmul(&xb, &xb).unwrap();
            let y = t.softmax(&y, 1).unwrap();
            let y2 = t.mul(&y, &y).unwrap();
            let s = t.sum(&y2).unwrap();
            let g = t.backward(&s).unwrap();
            g.get(&xb).to_vec()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let mut t = Tape::new();
            let y = t.softmax(&arr(&[3, 4], &v), 1).unwrap();
            for r in 0..3 {
                let s: f64 = y.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn bilinear_reproduces_affine_fields(u in 0.0f64..3.0, v in 0.0f64..2.0) {
            // f(row, col) = 2 col - row + 1 is reproduced exactly in the interior
            let vals: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| 2.0 * c as f64 - r as f64 + 1.0)).collect();
            let mut t = Tape::new();
            let y = t.grid_sample(&arr(&[3, 4, 1], &vals), &arr(&[1, 2], &[u, v])).unwrap();
            prop_assert!((y.values()[0] - (2.0 * u - v + 1.0)).abs() < 1e-12);
        }
    }
}
