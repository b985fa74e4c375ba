//! Convolution and pooling kernels against direct nested-loop implementations.

use cellsearch::autodiff::kernels::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, pool2d_backward, pool2d_forward,
};
use cellsearch::autodiff::{ConvGeom, PoolKind};
use cellsearch::tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_conv(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let [n, _, h, wd] = x.shape().dims();
    let [cout, cin_g, kh, kw] = w.shape().dims();
    let oh = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let ow = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let cout_g = cout / g.groups;
    let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
    for b in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                acc += x.get(b, ci, iy as usize, ix as usize) * w.get(co, cl, ky, kx);
                            }
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Transposed direct convolution: scatter each output gradient back to its taps.
fn naive_conv_grads(x: &Tensor, w: &Tensor, gout: &Tensor, g: &ConvGeom) -> (Tensor, Tensor) {
    let [n, _, h, wd] = x.shape().dims();
    let [cout, cin_g, kh, kw] = w.shape().dims();
    let [_, _, oh, ow] = gout.shape().dims();
    let cout_g = cout / g.groups;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    for b in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = gout.get(b, co, oy, ox);
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let v = gx.get(b, ci, iy, ix) + go * w.get(co, cl, ky, kx);
                                gx.set(b, ci, iy, ix, v);
                                let v = gw.get(co, cl, ky, kx) + go * x.get(b, ci, iy, ix);
                                gw.set(co, cl, ky, kx, v);
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn naive_pool(x: &Tensor, kind: PoolKind, stride: usize) -> Tensor {
    let [n, c, h, w] = x.shape().dims();
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut total = 0.0;
                    let mut count = 0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let iy = (oy * stride + dy) as isize - 1;
                            let ix = (ox * stride + dx) as isize - 1;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let v = x.get(b, ch, iy as usize, ix as usize);
                            if v > best {
                                best = v;
                            }
                            total += v;
                            count += 1;
                        }
                    }
                    let v = match kind {
                        PoolKind::Max => best,
                        PoolKind::Avg => total / count as f64,
                    };
                    out.set(b, ch, oy, ox, v);
                }
            }
        }
    }
    out
}

fn random(shape: Shape, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn full_overlap_sum_at_center() {
    let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let y = conv2d_forward(&x, &w, &ConvGeom::new(1, 1, 1, 1)).unwrap();
    assert_eq!(y.get(0, 0, 1, 1), 9.0);
}

#[test]
fn zero_weight_gives_zero_output() {
    let x = random(Shape::new(2, 3, 5, 5), 1);
    let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
    let y = conv2d_forward(&x, &w, &ConvGeom::new(1, 1, 1, 1)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn strided_conv_matches_direct_loops() {
    let x = random(Shape::new(2, 4, 8, 8), 2);
    let w = random(Shape::new(8, 4, 3, 3), 3);
    let g = ConvGeom::new(2, 1, 1, 1);
    let y = conv2d_forward(&x, &w, &g).unwrap();
    assert_eq!(y.shape(), Shape::new(2, 8, 4, 4));
    assert!(y.max_abs_diff(&naive_conv(&x, &w, &g)) <= 1e-10);
}

#[test]
fn constant_input_avg_pool_interior() {
    let x = Tensor::full(Shape::new(1, 1, 5, 5), 2.5);
    let y = pool2d_forward(&x, PoolKind::Avg, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 2.5));
}

#[test]
fn max_pool_of_raster_takes_bottom_right() {
    let x = Tensor::from_vec(Shape::new(1, 1, 6, 6), (0..36).map(f64::from).collect()).unwrap();
    let y = pool2d_forward(&x, PoolKind::Max, 2).unwrap();
    for oy in 0..3 {
        for ox in 0..3 {
            let iy = (2 * oy + 1).min(5);
            let ix = (2 * ox + 1).min(5);
            assert_eq!(y.get(0, 0, oy, ox), (iy * 6 + ix) as f64);
        }
    }
}

#[test]
fn strided_pools_match_window_scan_exactly() {
    let x = random(Shape::new(1, 2, 6, 6), 4);
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let y = pool2d_forward(&x, kind, 2).unwrap();
        assert_eq!(y.data(), naive_pool(&x, kind, 2).data(), "{kind:?}");
    }
}

#[test]
fn max_pool_ties_route_to_first_in_scan_order() {
    let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let g = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
    let gin = pool2d_backward(&g, &x, PoolKind::Max, 3);
    let mut expect = vec![0.0; 9];
    expect[0] = 1.0;
    assert_eq!(gin.data(), &expect[..]);
}

#[test]
fn max_pool_backward_matches_argmax_routing() {
    let x = random(Shape::new(2, 2, 7, 6), 5);
    for stride in [1, 2] {
        let y = pool2d_forward(&x, PoolKind::Max, stride).unwrap();
        let g = random(y.shape(), 6);
        let gin = pool2d_backward(&g, &x, PoolKind::Max, stride);
        let [n, c, oh, ow] = y.shape().dims();
        let mut expect = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (0, 0, f64::NEG_INFINITY);
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let iy = (oy * stride + dy) as isize - 1;
                                let ix = (ox * stride + dx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                    continue;
                                }
                                let v = x.get(b, ch, iy as usize, ix as usize);
                                if v > best.2 {
                                    best = (iy as usize, ix as usize, v);
                                }
                            }
                        }
                        let v = expect.get(b, ch, best.0, best.1) + g.get(b, ch, oy, ox);
                        expect.set(b, ch, best.0, best.1, v);
                    }
                }
            }
        }
        assert!(gin.max_abs_diff(&expect) <= 1e-12);
    }
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize, usize, bool, u64)> {
    (
        1usize..=2, // batch
        1usize..=4, // channels in
        1usize..=4, // channels out
        3usize..=8, // height
        3usize..=8, // width
        prop::sample::select(vec![1usize, 3, 5]),
        1usize..=2, // stride
        0usize..=2, // padding
        1usize..=2, // dilation
        any::<bool>(),
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_forward_and_backward_match_direct_loops(
        (n, cin, cout, h, w, k, stride, padding, dilation, depthwise, seed) in conv_case()
    ) {
        let (cout, groups) = if depthwise { (cin, cin) } else { (cout, 1) };
        let span = dilation * (k - 1) + 1;
        prop_assume!(h + 2 * padding >= span && w + 2 * padding >= span);
        let g = ConvGeom::new(stride, padding, dilation, groups);
        let x = random(Shape::new(n, cin, h, w), seed);
        let wt = random(Shape::new(cout, cin / groups, k, k), seed ^ 1);
        let y = conv2d_forward(&x, &wt, &g).unwrap();
        prop_assert!(y.max_abs_diff(&naive_conv(&x, &wt, &g)) <= 1e-10);

        let gout = random(y.shape(), seed ^ 2);
        let (gx, gw) = naive_conv_grads(&x, &wt, &gout, &g);
        prop_assert!(conv2d_backward_input(&gout, x.shape(), &wt, &g).max_abs_diff(&gx) <= 1e-10);
        prop_assert!(conv2d_backward_weight(&gout, &x, wt.shape(), &g).max_abs_diff(&gw) <= 1e-10);
    }

    #[test]
    fn pools_match_window_scan(
        n in 1usize..=2, c in 1usize..=4, h in 1usize..=8, w in 1usize..=8,
        stride in 1usize..=2, seed in any::<u64>()
    ) {
        let x = random(Shape::new(n, c, h, w), seed);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let y = pool2d_forward(&x, kind, stride).unwrap();
            let expect = naive_pool(&x, kind, stride);
            prop_assert_eq!(y.data(), expect.data());
        }
    }
}
