//! Finite-difference gradient checks shared by the gradcheck and
//! acceptance targets. Single ops return their largest pointwise relative
//! error; composites return a kink-aware [`SmoothCheck`].

use super::*;
use rand::Rng;
use wsdet::classifier::{classifier_loss_from_logits, ClassifierHead};
use wsdet::loss::{bce_grad, bce_loss, detection_loss, dice_grad, dice_loss, LossWeights};
use wsdet::nn::{
    conv2d, conv2d_backward, conv_transpose2x2, conv_transpose2x2_backward, dropout, dropout2d,
    dropout_backward, global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, softmax, softmax_backward, BatchNorm2d, Linear, Mode,
};
use wsdet::unet::{UNet, UNetConfig};
use wsdet::{Dims, Module, Tensor4};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
/// Fraction of sampled coordinates that must be free of kinks at `STEP`.
pub const MIN_USABLE: f64 = 0.2;

pub type Errs = Vec<(String, f64)>;

pub fn conv3x3_and_1x1(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        for k in [3, 1] {
            let x = uniform(Dims::new(2, 3, 5, 6), -1.0, 1.0, &mut r);
            let w = uniform(Dims::new(4, 3, k, k), -1.0, 1.0, &mut r);
            let b: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let probe = uniform(Dims::new(2, 4, 5, 6), -1.0, 1.0, &mut r);
            let g = conv2d_backward(&x, &w, &probe).unwrap();
            let e = max_rel_err(x.data(), g.input.data(), None, |v| {
                dot(&conv2d(&with_data(&x, v), &w, &b).unwrap(), &probe)
            });
            errs.push(("conv input".to_string(), e));
            let e = max_rel_err(w.data(), g.weight.data(), None, |v| {
                dot(&conv2d(&x, &with_data(&w, v), &b).unwrap(), &probe)
            });
            errs.push(("conv weight".to_string(), e));
            let e = max_rel_err(&b, &g.bias, None, |v| {
                dot(&conv2d(&x, &w, v).unwrap(), &probe)
            });
            errs.push(("conv bias".to_string(), e));
        }
    }
}

pub fn transposed_conv(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        let x = uniform(Dims::new(2, 3, 3, 4), -1.0, 1.0, &mut r);
        let w = uniform(Dims::new(3, 2, 2, 2), -1.0, 1.0, &mut r);
        let b: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let probe = uniform(Dims::new(2, 2, 6, 8), -1.0, 1.0, &mut r);
        let g = conv_transpose2x2_backward(&x, &w, &probe).unwrap();
        let f = |x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]| {
            dot(&conv_transpose2x2(x, w, b).unwrap(), &probe)
        };
        errs.push((
            "tconv input".to_string(),
            max_rel_err(x.data(), g.input.data(), None, |v| {
                f(&with_data(&x, v), &w, &b)
            }),
        ));
        errs.push((
            "tconv weight".to_string(),
            max_rel_err(w.data(), g.weight.data(), None, |v| {
                f(&x, &with_data(&w, v), &b)
            }),
        ));
        errs.push((
            "tconv bias".to_string(),
            max_rel_err(&b, &g.bias, None, |v| f(&x, &w, v)),
        ));
    }
}

pub fn activations(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        let d = Dims::new(2, 3, 2, 3);
        let x = away_from_zero(d, &mut r);
        let probe = uniform(d, -1.0, 1.0, &mut r);

        let g = relu_backward(&relu(&x), &probe).unwrap();
        let e = max_rel_err(x.data(), g.data(), None, |v| {
            dot(&relu(&with_data(&x, v)), &probe)
        });
        errs.push(("relu".to_string(), e));

        let x = uniform(d, -3.0, 3.0, &mut r);
        let g = sigmoid_backward(&sigmoid(&x), &probe).unwrap();
        let e = max_rel_err(x.data(), g.data(), None, |v| {
            dot(&sigmoid(&with_data(&x, v)), &probe)
        });
        errs.push(("sigmoid".to_string(), e));

        let g = softmax_backward(&softmax(&x), &probe).unwrap();
        let e = max_rel_err(x.data(), g.data(), None, |v| {
            dot(&softmax(&with_data(&x, v)), &probe)
        });
        errs.push(("softmax".to_string(), e));
    }
}

pub fn pooling(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        let d = Dims::new(2, 2, 4, 6);
        // distinct values 0.01 apart, so no window max changes under the probe step
        let mut vals: Vec<f64> = (0..d.len()).map(|i| i as f64 * 0.01).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut r);
        let x = Tensor4::from_vec(d, vals).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        let probe = uniform(y.dims(), -1.0, 1.0, &mut r);
        let g = maxpool2_backward(&probe, &arg, d).unwrap();
        let e = max_rel_err(x.data(), g.data(), None, |v| {
            dot(&maxpool2(&with_data(&x, v)).unwrap().0, &probe)
        });
        errs.push(("maxpool".to_string(), e));

        let probe = uniform(Dims::new(2, 2, 1, 1), -1.0, 1.0, &mut r);
        let g = global_avg_pool_backward(&probe, d).unwrap();
        let e = max_rel_err(x.data(), g.data(), None, |v| {
            dot(&global_avg_pool(&with_data(&x, v)), &probe)
        });
        errs.push(("gap".to_string(), e));
    }
}

pub fn linear_layer(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        let mut lin = Linear::<f64>::new("l", 5, 3, &mut r);
        lin.bias.value = uniform(lin.bias.dims(), -1.0, 1.0, &mut r);
        let x = uniform(Dims::new(4, 5, 1, 1), -1.0, 1.0, &mut r);
        let probe = uniform(Dims::new(4, 3, 1, 1), -1.0, 1.0, &mut r);
        let gx = lin.backward(&x, &probe).unwrap();
        let e = max_rel_err(x.data(), gx.data(), None, |v| {
            dot(&lin.forward(&with_data(&x, v)).unwrap(), &probe)
        });
        errs.push(("linear input".to_string(), e));
        for which in 0..2 {
            let p = if which == 0 { &lin.weight } else { &lin.bias };
            let e = max_rel_err(p.value.data(), p.grad.data(), None, |v| {
                let mut l = lin.clone();
                let t = if which == 0 {
                    &mut l.weight
                } else {
                    &mut l.bias
                };
                t.value.data_mut().copy_from_slice(v);
                dot(&l.forward(&x).unwrap(), &probe)
            });
            errs.push(("linear params".to_string(), e));
        }
    }
}

pub fn batch_norm_train_mode(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        bn.gamma.value = uniform(bn.gamma.dims(), 0.5, 1.5, &mut r);
        bn.beta.value = uniform(bn.beta.dims(), -1.0, 1.0, &mut r);
        let x = uniform(Dims::new(2, 3, 3, 3), -2.0, 2.0, &mut r);
        let probe = uniform(x.dims(), -1.0, 1.0, &mut r);
        let base = bn.clone();
        let (_, cache) = bn.forward_train(&x).unwrap();
        let gx = bn.backward(&cache, &probe).unwrap();
        let e = max_rel_err(x.data(), gx.data(), None, |v| {
            dot(
                &base.clone().forward_train(&with_data(&x, v)).unwrap().0,
                &probe,
            )
        });
        errs.push(("bn input".to_string(), e));
        for which in 0..2 {
            let p = if which == 0 { &bn.gamma } else { &bn.beta };
            let e = max_rel_err(p.value.data(), p.grad.data(), None, |v| {
                let mut b = base.clone();
                let t = if which == 0 {
                    &mut b.gamma
                } else {
                    &mut b.beta
                };
                t.value.data_mut().copy_from_slice(v);
                dot(&b.forward_train(&x).unwrap().0, &probe)
            });
            errs.push(("bn params".to_string(), e));
        }
    }
}

pub fn dropout_with_a_fixed_mask(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        let x = uniform(Dims::new(2, 4, 3, 3), -1.0, 1.0, &mut r);
        let probe = uniform(x.dims(), -1.0, 1.0, &mut r);
        for channel in [false, true] {
            let run = |x: &Tensor4<f64>| {
                let mut mr = rng(100 + seed);
                if channel {
                    dropout2d(x, 0.3, Mode::Train, &mut mr).unwrap()
                } else {
                    dropout(x, 0.3, Mode::Train, &mut mr).unwrap()
                }
            };
            let (_, mask) = run(&x);
            let g = dropout_backward(&probe, mask.as_ref());
            let e = max_rel_err(x.data(), g.data(), None, |v| {
                dot(&run(&with_data(&x, v)).0, &probe)
            });
            errs.push(("dropout".to_string(), e));
        }
    }
}

pub fn loss_terms_and_detection_loss(seed: u64, errs: &mut Errs) {
    {
        let mut r = rng(seed);
        let d = Dims::new(2, 1, 4, 5);
        let x = uniform(d, -3.0, 3.0, &mut r);
        let soft = uniform(d, 0.0, 1.0, &mut r);
        let binary = soft.map(|v| if v > 0.6 { 1.0 } else { 0.0 });
        for y in [&soft, &binary] {
            let w_c = r.gen_range(1.0..5.0);
            let g = bce_grad(&x, y, w_c).unwrap();
            let e = max_rel_err(x.data(), g.data(), None, |v| {
                bce_loss(&with_data(&x, v), y, w_c).unwrap()
            });
            errs.push(("bce".to_string(), e));
            for smooth in [1.0, 0.0] {
                let g = dice_grad(&x, y, smooth).unwrap();
                let e = max_rel_err(x.data(), g.data(), None, |v| {
                    dice_loss(&with_data(&x, v), y, smooth).unwrap()
                });
                errs.push(("dice".to_string(), e));
            }
            let weights = LossWeights {
                w_c: Some(w_c),
                ..LossWeights::default()
            };
            let (_, g) = detection_loss(&x, y, &weights).unwrap();
            let e = max_rel_err(x.data(), g.data(), None, |v| {
                detection_loss(&with_data(&x, v), y, &weights)
                    .unwrap()
                    .0
                    .total
            });
            errs.push(("detection loss".to_string(), e));
        }
    }
}

/// Every single-op check for one seed.
pub fn all_ops(seed: u64) -> Errs {
    let mut e = Errs::new();
    conv3x3_and_1x1(seed, &mut e);
    transposed_conv(seed, &mut e);
    activations(seed, &mut e);
    pooling(seed, &mut e);
    linear_layer(seed, &mut e);
    batch_norm_train_mode(seed, &mut e);
    dropout_with_a_fixed_mask(seed, &mut e);
    loss_terms_and_detection_loss(seed, &mut e);
    classifier_loss(seed, &mut e);
    e
}

pub fn classifier_loss(seed: u64, errs: &mut Errs) {
    let mut r = rng(seed);
    let logits = uniform(Dims::new(3, 2, 1, 1), -2.0, 2.0, &mut r);
    let labels: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..1.0)).collect();
    let w_c = r.gen_range(1.0..3.0);
    let (_, g) = classifier_loss_from_logits(&logits, &labels, w_c).unwrap();
    let e = max_rel_err(logits.data(), g.data(), None, |v| {
        classifier_loss_from_logits(&with_data(&logits, v), &labels, w_c)
            .unwrap()
            .0
    });
    errs.push(("classifier loss".to_string(), e));
}

/// GAP, hidden layer, ReLU, dropout, output layer and the classifier loss.
pub fn classifier_head(seed: u64) -> SmoothCheck {
    let mut r = rng(seed);
    let labels: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..1.0)).collect();
    let w_c = r.gen_range(1.0..3.0);
    let mut head = ClassifierHead::<f64>::new(6, &mut r);
    for p in head.params_mut() {
        p.value = uniform(p.dims(), -0.5, 0.5, &mut r);
    }
    let bridge = uniform(Dims::new(3, 6, 2, 2), -1.0, 1.0, &mut r);
    let loss = |h: &ClassifierHead<f64>, b: &Tensor4<f64>| {
        let (z, _) = h.forward_train(b, &mut rng(200 + seed)).unwrap();
        classifier_loss_from_logits(&z, &labels, w_c).unwrap().0
    };
    let (z, cache) = head.forward_train(&bridge, &mut rng(200 + seed)).unwrap();
    let (_, gz) = classifier_loss_from_logits(&z, &labels, w_c).unwrap();
    let gb = head.backward(&cache, &gz).unwrap();
    let base = head.clone();
    let mut check = SmoothCheck::default();
    let mut bv = bridge.data().to_vec();
    for i in 0..bv.len() {
        check.add(&mut bv, i, gb.data()[i], &mut |v| {
            loss(&base, &with_data(&bridge, v))
        });
    }
    for (pi, p) in head.params().into_iter().enumerate() {
        let mut v = p.value.data().to_vec();
        for _ in 0..24 {
            let i = r.gen_range(0..v.len());
            check.add(&mut v, i, p.grad.data()[i], &mut |v| {
                let mut h = base.clone();
                h.params_mut()[pi].value.data_mut().copy_from_slice(v);
                loss(&h, &bridge)
            });
        }
    }
    check
}

/// Tiny backbone (s = 0.125, 32x32, batch 2) with the classifier on its
/// bridge; detection and classifier losses backpropagated together. Samples
/// 20 input coordinates, 2 per backbone tensor and 1 per head tensor.
pub fn tiny_model(seed: u64) -> SmoothCheck {
    let cfg = UNetConfig::with_scale(0.125);
    let mut r = rng(seed);
    let mut net = UNet::<f64>::new(cfg, &mut r).unwrap();
    let mut head = ClassifierHead::<f64>::new(cfg.bridge_channels(), &mut r);
    let x = uniform(Dims::new(2, 3, 32, 32), 0.0, 1.0, &mut r);
    let y =
        uniform(Dims::new(2, 1, 32, 32), 0.0, 1.0, &mut r).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    let labels = [1.0, 0.3];
    let weights = LossWeights {
        w_c: Some(3.0),
        ..LossWeights::default()
    };
    let total = |net: &UNet<f64>, head: &ClassifierHead<f64>, x: &Tensor4<f64>| -> f64 {
        let mut net = net.clone();
        let mut dr = rng(300 + seed);
        let (out, _) = net.forward_train(x, &mut dr).unwrap();
        let (z, _) = head.forward_train(&out.bridge, &mut dr).unwrap();
        detection_loss(&out.logits, &y, &weights).unwrap().0.total
            + classifier_loss_from_logits(&z, &labels, 1.0).unwrap().0
    };
    let (base_net, base_head) = (net.clone(), head.clone());
    let mut dr = rng(300 + seed);
    let (out, cache) = net.forward_train(&x, &mut dr).unwrap();
    let (z, ccache) = head.forward_train(&out.bridge, &mut dr).unwrap();
    let (_, gl) = detection_loss(&out.logits, &y, &weights).unwrap();
    let (_, gz) = classifier_loss_from_logits(&z, &labels, 1.0).unwrap();
    let gb = head.backward(&ccache, &gz).unwrap();
    let gx = net.backward(cache, &gl, Some(&gb)).unwrap();

    let mut check = SmoothCheck::default();
    let mut xv = x.data().to_vec();
    for _ in 0..20 {
        let i = r.gen_range(0..xv.len());
        check.add(&mut xv, i, gx.data()[i], &mut |v| {
            total(&base_net, &base_head, &with_data(&x, v))
        });
    }
    for (pi, p) in net.params().into_iter().enumerate() {
        let mut v = p.value.data().to_vec();
        for _ in 0..2 {
            let i = r.gen_range(0..v.len());
            check.add(&mut v, i, p.grad.data()[i], &mut |v| {
                let mut n = base_net.clone();
                n.params_mut()[pi].value.data_mut().copy_from_slice(v);
                total(&n, &base_head, &x)
            });
        }
    }
    for (pi, p) in head.params().into_iter().enumerate() {
        let mut v = p.value.data().to_vec();
        let i = r.gen_range(0..v.len());
        check.add(&mut v, i, p.grad.data()[i], &mut |v| {
            let mut h = base_head.clone();
            h.params_mut()[pi].value.data_mut().copy_from_slice(v);
            total(&base_net, &h, &x)
        });
    }
    check
}
