mod common;

use common::{init_params, naive_conv2d, random_tensor, zero_matching, zero_params};
use saccn::amm::DILATION;
use saccn::gradcheck::grad_check_session;
use saccn::{AmmBlock, Conv2dLayer, Module, Session};

#[test]
fn zero_weights_give_zero_map() {
    let amm = AmmBlock::new("amm", 3, 5).unwrap();
    let p = zero_params(&amm);
    let mut s = Session::new(&p, false);
    let x = s.input(random_tensor(1, &[2, 3, 6, 7], -1.0, 1.0)).unwrap();
    let y = amm.forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).shape(), &[2, 5, 6, 7]);
    assert!(s.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zeroed_row_half_leaves_the_dilated_column_conv() {
    let amm = AmmBlock::new("amm", 4, 3).unwrap();
    let mut p = init_params(&amm, 2);
    zero_matching(&mut p, &["amm.branch3.1x3."]);
    let (n, c, h, w) = (1, 4, 7, 9);
    let xv = random_tensor(3, &[n, c, h, w], -1.0, 1.0);
    let mut s = Session::new(&p, false);
    let x = s.input(xv.clone()).unwrap();
    let pair = amm.pairs.iter().find(|p| p.k == 3).unwrap();
    let y = pair.forward(&mut s, x).unwrap();
    let (expected, ho, wo) = naive_conv2d(
        xv.data(),
        (n, c, h, w),
        p.get("amm.branch3.3x1.weight").unwrap().data(),
        (3, 3, 1),
        Some(p.get("amm.branch3.3x1.bias").unwrap().data()),
        (1, 1),
        (DILATION, 0),
        (DILATION, 1),
    );
    assert_eq!((ho, wo), (h, w));
    let got = s.value(y).data();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn every_branch_keeps_spatial_extent() {
    let amm = AmmBlock::new("amm", 4, 6).unwrap();
    let p = init_params(&amm, 4);
    let xv = random_tensor(5, &[1, 4, 7, 9], -1.0, 1.0);
    let mut s = Session::new(&p, false);
    let x = s.input(xv).unwrap();
    let point = amm.point.forward(&mut s, x).unwrap();
    assert_eq!(s.value(point).shape(), &[1, 6, 7, 9]);
    for pair in &amm.pairs {
        for layer in [&pair.row, &pair.col] {
            let y = layer.forward(&mut s, x).unwrap();
            assert_eq!(s.value(y).shape(), &[1, 6, 7, 9], "{}", layer.name);
        }
    }
    let y = amm.forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).shape(), &[1, 6, 7, 9]);
}

#[test]
fn gradient_matches_finite_differences() {
    let amm = AmmBlock::new("amm", 4, 3).unwrap();
    let p = init_params(&amm, 6);
    let x = random_tensor(7, &[1, 4, 7, 9], -1.0, 1.0);
    let r = grad_check_session(
        &p,
        |s, v| {
            let y = amm.forward(s, v)?;
            s.tape.sum_all(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn branch_ratios_are_two_over_k() {
    for (cin, cout) in [(8, 8), (3, 5), (16, 4)] {
        let report = AmmBlock::new("amm", cin, cout).unwrap().cost_report();
        let ratios: Vec<_> = report.branches.iter().map(|b| (b.k, b.ratio())).collect();
        assert_eq!(ratios, vec![(3, (2, 3)), (5, (2, 5))]);
    }
}

#[test]
fn block_ratio_is_weighted_mean_of_branch_ratios() {
    let amm = AmmBlock::new("amm", 6, 10).unwrap();
    let report = amm.cost_report();
    let mut num = 0.0;
    let mut den = 0.0;
    for pair in &amm.pairs {
        let asym = (pair.row.clone().without_bias().param_count() + pair.col.clone().without_bias().param_count()) as f64;
        let square = Conv2dLayer::new("sq", 6, 10, (pair.k, pair.k)).without_bias().param_count() as f64;
        num += square * (asym / square);
        den += square;
    }
    assert!((report.ratio_f64() - num / den).abs() < 1e-15);
}
