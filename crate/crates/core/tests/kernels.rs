mod common;

use proptest::prelude::*;
use qlwa::rng::Rng;
use qlwa::tensor::{self, Tensor};

const TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: [usize; 2],
    stride: [usize; 2],
    pad: [usize; 2],
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1..3usize, 1..5usize, 1..9usize, 1..9usize, 1..6usize, 0..3usize, 0..3usize, 1..4usize, 1..4usize, any::<u64>())
        .prop_flat_map(|(n, c, h, w, o, ph, pw, sh, sw, seed)| {
            (1..=h + 2 * ph, 1..=w + 2 * pw).prop_map(move |(kh, kw)| ConvCase {
                n,
                c,
                h,
                w,
                o,
                k: [kh, kw],
                stride: [sh, sw],
                pad: [ph, pw],
                seed,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv2d_matches_oracle(case in conv_case()) {
        let mut rng = Rng::new(case.seed);
        let x = common::random_tensor(&mut rng, &[case.n, case.c, case.h, case.w], -1.0, 1.0);
        let w = common::random_tensor(&mut rng, &[case.o, case.c, case.k[0], case.k[1]], -1.0, 1.0);
        let b = common::random_tensor(&mut rng, &[case.o], -1.0, 1.0);
        let got = tensor::conv2d(&x, &w, &b, case.stride, case.pad).unwrap();
        let (shape, want) = common::conv2d(&x, &w, &b, case.stride, case.pad);
        prop_assert_eq!(got.shape(), &shape[..]);
        prop_assert!(common::max_rel_err(got.data(), &want) <= TOL);
    }

    #[test]
    fn dense_matches_oracle(n in 1..4usize, f in 1..300usize, o in 1..12usize, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = common::random_tensor(&mut rng, &[n, f], -1.0, 1.0);
        let w = common::random_tensor(&mut rng, &[o, f], -1.0, 1.0);
        let b = common::random_tensor(&mut rng, &[o], -1.0, 1.0);
        let got = tensor::dense(&x, &w, &b).unwrap();
        let (shape, want) = common::dense(&x, &w, &b);
        prop_assert_eq!(got.shape(), &shape[..]);
        prop_assert!(common::max_rel_err(got.data(), &want) <= TOL);
    }

    #[test]
    fn pools_match_oracle(
        n in 1..3usize, c in 1..4usize, h in 1..9usize, w in 1..9usize,
        wy in 1..4usize, wx in 1..4usize, sy in 1..4usize, sx in 1..4usize, seed in any::<u64>(),
    ) {
        prop_assume!(wy <= h && wx <= w);
        let mut rng = Rng::new(seed);
        let x = common::random_tensor(&mut rng, &[n, c, h, w], -3.0, 3.0);
        let got = tensor::maxpool2d(&x, [wy, wx], [sy, sx]).unwrap();
        let (shape, want) = common::maxpool(&x, [wy, wx], [sy, sx]);
        prop_assert_eq!(got.shape(), &shape[..]);
        prop_assert!(common::max_rel_err(got.data(), &want) == 0.0);

        let got = tensor::avgpool2d(&x, [wy, wx], [sy, sx]).unwrap();
        let (_, want) = common::avgpool(&x, [wy, wx], [sy, sx]);
        prop_assert!(common::max_rel_err(got.data(), &want) <= TOL);

        let got = tensor::global_avg_pool(&x).unwrap();
        let (shape, want) = common::global_avg_pool(&x);
        prop_assert_eq!(got.shape(), &shape[..]);
        prop_assert!(common::max_rel_err(got.data(), &want) <= TOL);
    }

    #[test]
    fn add_relu_flatten(len in 1..64usize, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = common::random_tensor(&mut rng, &[1, len], -2.0, 2.0);
        let b = common::random_tensor(&mut rng, &[1, len], -2.0, 2.0);
        let s = tensor::add(&a, &b).unwrap();
        for i in 0..len {
            prop_assert_eq!(s.data()[i], a.data()[i] + b.data()[i]);
        }
        let r = tensor::relu(&s);
        prop_assert!(r.data().iter().zip(s.data()).all(|(&r, &s)| r == s.max(0.0)));
        let f = tensor::flatten(&Tensor::new(vec![1, len, 1, 1], a.data().to_vec()).unwrap());
        prop_assert_eq!(f.shape(), &[1, len][..]);
    }
}

#[test]
fn hand_computed_conv() {
    // 1x1x3x3 input, 2x2 kernel, stride 1, no padding
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
    let b = Tensor::new(vec![1], vec![0.5]).unwrap();
    let y = tensor::conv2d(&x, &w, &b, [1, 1], [0, 0]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[-3.5, -3.5, -3.5, -3.5]);
}

#[test]
fn shape_errors() {
    let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
    let w = Tensor::zeros(&[3, 1, 3, 3]).unwrap();
    let b = Tensor::zeros(&[3]).unwrap();
    assert!(tensor::conv2d(&x, &w, &b, [1, 1], [1, 1]).is_err());
    assert!(tensor::maxpool2d(&x, [5, 5], [1, 1]).is_err());
    assert!(tensor::add(&x, &Tensor::zeros(&[1, 2, 4, 3]).unwrap()).is_err());
    assert!(tensor::dense(&Tensor::zeros(&[1, 3]).unwrap(), &Tensor::zeros(&[2, 4]).unwrap(), &Tensor::zeros(&[2]).unwrap()).is_err());
}
