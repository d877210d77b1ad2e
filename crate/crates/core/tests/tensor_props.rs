use micropatch::tensor::{ConvGeometry, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

/// Direct-loop convolution (cross-correlation) with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as i64 - pad as i64;
                                let ix = (xo * stride + dx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * ci + c) * k + dy) * k + dx];
                                s += xv * wv;
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    (vec![b, co, oh, ow], out)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let mut t = Tape::<f64>::inference();
        let v = t.constant(x.clone());
        let s = t.softmax(v).unwrap();
        let c = x.shape()[1];
        for row in t.value(s).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!(close(row.iter().sum(), 1.0));
        }
    }

    #[test]
    fn cross_entropy_is_negative_log_softmax(x in tensor(vec![3, 4]), labels in prop::collection::vec(0usize..4, 3)) {
        let mut t = Tape::<f64>::inference();
        let v = t.constant(x.clone());
        let s = t.softmax(v).unwrap();
        let ce = t.cross_entropy(v, &labels).unwrap();
        let p = t.value(s).data().to_vec();
        let want = -labels.iter().enumerate().map(|(i, &l)| p[i * 4 + l].ln()).sum::<f64>() / 3.0;
        prop_assert!(t.value(ce).data()[0] >= 0.0);
        prop_assert!(close(t.value(ce).data()[0], want));
    }

    #[test]
    fn permute_round_trips(x in tensor(vec![2, 3, 4]), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let mut inv = vec![0; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut t = Tape::<f64>::inference();
        let v = t.constant(x.clone());
        let p = t.permute(v, &perm).unwrap();
        let back = t.permute(p, &inv).unwrap();
        prop_assert_eq!(t.value(back), &x);
    }

    #[test]
    fn matmul_matches_naive(a in tensor(vec![3, 5]), b in tensor(vec![5, 2])) {
        let mut t = Tape::<f64>::inference();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..5).map(|k| a.data()[i * 5 + k] * b.data()[k * 2 + j]).sum();
                prop_assert!(close(t.value(c).data()[i * 2 + j], want));
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_loops(
        (x, w, stride, pad) in (1usize..3, 1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3]), 1usize..3)
            .prop_flat_map(|(ci, co, extra, k, stride)| {
                let side = k + extra;
                (tensor(vec![2, ci, side, side]), tensor(vec![co, ci, k, k]), Just(stride), 0usize..=k / 2)
            })
    ) {
        let mut t = Tape::<f64>::inference();
        let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(vx, vw, None, ConvGeometry::new(stride, pad)).unwrap();
        let (shape, want) = conv_oracle(&x, &w, stride, pad);
        prop_assert_eq!(t.value(y).shape(), &shape[..]);
        for (a, b) in t.value(y).data().iter().zip(&want) {
            prop_assert!(close(*a, *b));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in tensor(vec![4, 8])) {
        let spread = x.data().chunks(8).all(|r| {
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() > 1e-3
        });
        prop_assume!(spread);
        let mut t = Tape::<f64>::inference();
        let v = t.constant(x);
        let g = t.constant(Tensor::ones(&[8]));
        let b = t.constant(Tensor::zeros(&[8]));
        let y = t.layer_norm(v, g, b, 1e-12).unwrap();
        for row in t.value(y).data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_dominates_average_pool(x in tensor(vec![1, 2, 6, 6])) {
        let mut t = Tape::<f64>::inference();
        let v = t.constant(x);
        let mx = t.max_pool2d(v, 2, 2).unwrap();
        let av = t.avg_pool2d(v, 2, 2).unwrap();
        for (m, a) in t.value(mx).data().iter().zip(t.value(av).data()) {
            prop_assert!(m >= a);
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_scale_is_linear(x in tensor(vec![2, 5]), k in -3.0f64..3.0) {
        let mut t = Tape::<f64>::training(0);
        let v = t.leaf(x, true);
        let s = t.scale(v, k).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        let g = t.take_grad(v).unwrap();
        prop_assert!(g.data().iter().all(|&d| close(d, k)));
    }
}
