use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transderain::imagedata::Image;
use transderain::netblocks::{
    adaptive_avg_pool, attention_head, AglfBlock, ArchDescriptor, Checkpoint, Conv2d, DecoderKind, DecoderModel,
    EncoderModel, FeatureMap, Gelu, Gradients, Initializer, Layer, LayerNorm, Linear, NetError, ParamStore,
    SelfAttention, SpatialAttention, Spp, Tape,
};

fn random_map(h: usize, w: usize, c: usize, seed: u64, lo: f64, hi: f64) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(lo..hi)).collect())
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
}

/// Replaces every parameter with a draw from `[-scale, scale]` so that
/// zero-initialized biases and unit gains are exercised too.
fn scramble(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in &mut p.value {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-7
}

/// Compares analytic input and parameter gradients of `Σ r ⊙ layer(x)`
/// against central differences.
fn gradient_check<L: Layer<f64>>(layer: &L, store: &mut ParamStore<f64>, x: &FeatureMap<f64>, seed: u64) {
    let (y, cache) = layer.forward(store, x);
    let r = random_map(y.height(), y.width(), y.channels(), seed, -1.0, 1.0);
    let mut grads = Gradients::for_store(store);
    let dx = layer.backward(store, &cache, &r, &mut grads);
    assert_eq!(dx.shape(), x.shape());

    let objective = |store: &ParamStore<f64>, x: &FeatureMap<f64>| -> f64 {
        let y = layer.infer(store, x);
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let eps = 1e-6;

    let mut xp = x.clone();
    for i in 0..x.data().len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let up = objective(store, &xp);
        xp.data_mut()[i] = orig - eps;
        let down = objective(store, &xp);
        xp.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        assert!(close(dx.data()[i], numeric), "input[{i}]: analytic {} numeric {numeric}", dx.data()[i]);
    }

    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.id(&name).unwrap();
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + eps;
            let up = objective(store, x);
            store.value_mut(id)[i] = orig - eps;
            let down = objective(store, x);
            store.value_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id)[i];
            assert!(close(analytic, numeric), "{name}[{i}]: analytic {analytic} numeric {numeric}");
        }
    }
}

// ---------------------------------------------------------------------------
// Independent scalar re-implementations used as oracles.

mod oracle {
    use transderain::netblocks::{FeatureMap, ParamStore};

    pub struct Map {
        pub h: usize,
        pub w: usize,
        pub c: usize,
        pub v: Vec<f64>,
    }

    impl Map {
        pub fn of(f: &FeatureMap<f64>) -> Self {
            Self {
                h: f.height(),
                w: f.width(),
                c: f.channels(),
                v: f.data().to_vec(),
            }
        }

        pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
            self.v[(y * self.w + x) * self.c + c]
        }
    }

    fn p<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
        &s.by_name(name).unwrap_or_else(|| panic!("missing {name}")).value
    }

    pub fn conv(s: &ParamStore<f64>, name: &str, x: &Map, k: usize, stride: usize, cout: usize) -> Map {
        let wt = p(s, &format!("{name}.weight"));
        let b = p(s, &format!("{name}.bias"));
        let pad = k / 2;
        let ho = (x.h + 2 * pad - k) / stride + 1;
        let wo = (x.w + 2 * pad - k) / stride + 1;
        let mut v = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.c {
                                acc += x.at(iy as usize, ix as usize, ci) * wt[((ky * k + kx) * x.c + ci) * cout + co];
                            }
                        }
                    }
                    v[(oy * wo + ox) * cout + co] = acc;
                }
            }
        }
        Map { h: ho, w: wo, c: cout, v }
    }

    pub fn linear(s: &ParamStore<f64>, name: &str, x: &Map, cout: usize) -> Map {
        let wt = p(s, &format!("{name}.weight"));
        let b = p(s, &format!("{name}.bias"));
        let mut v = Vec::with_capacity(x.h * x.w * cout);
        for t in 0..x.h * x.w {
            for o in 0..cout {
                let mut acc = b[o];
                for i in 0..x.c {
                    acc += x.v[t * x.c + i] * wt[i * cout + o];
                }
                v.push(acc);
            }
        }
        Map { h: x.h, w: x.w, c: cout, v }
    }

    pub fn gelu(x: &Map) -> Map {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        Map {
            h: x.h,
            w: x.w,
            c: x.c,
            v: x.v.iter().map(|&a| 0.5 * a * (1.0 + (k * (a + 0.044715 * a * a * a)).tanh())).collect(),
        }
    }

    pub fn sigmoid(a: f64) -> f64 {
        1.0 / (1.0 + (-a).exp())
    }

    pub fn layer_norm(s: &ParamStore<f64>, name: &str, x: &Map) -> Map {
        let g = p(s, &format!("{name}.gain"));
        let b = p(s, &format!("{name}.shift"));
        let mut v = Vec::with_capacity(x.v.len());
        for tok in x.v.chunks(x.c) {
            let mean = tok.iter().sum::<f64>() / x.c as f64;
            let var = tok.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / x.c as f64;
            for (j, a) in tok.iter().enumerate() {
                v.push((a - mean) / (var + 1e-5).sqrt() * g[j] + b[j]);
            }
        }
        Map { h: x.h, w: x.w, c: x.c, v }
    }

    pub fn spatial_attention(s: &ParamStore<f64>, name: &str, x: &Map) -> Map {
        let mut pooled = Vec::new();
        for tok in x.v.chunks(x.c) {
            pooled.push(tok.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            pooled.push(tok.iter().sum::<f64>() / x.c as f64);
        }
        let pm = Map { h: x.h, w: x.w, c: 2, v: pooled };
        let logits = conv(s, &format!("{name}.conv"), &pm, 7, 1, 1);
        let mut v = x.v.clone();
        for (t, chunk) in v.chunks_mut(x.c).enumerate() {
            let m = sigmoid(logits.v[t]);
            chunk.iter_mut().for_each(|a| *a *= m);
        }
        Map { h: x.h, w: x.w, c: x.c, v }
    }

    pub fn attention(s: &ParamStore<f64>, name: &str, x: &Map, heads: usize) -> Map {
        let c = x.c;
        let q = linear(s, &format!("{name}.query"), x, c);
        let k = linear(s, &format!("{name}.key"), x, c);
        let vv = linear(s, &format!("{name}.value"), x, c);
        let n = x.h * x.w;
        let d = c / heads;
        let mut merged = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|e| q.v[i * c + h * d + e] * k.v[j * c + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|a| (a - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..d {
                    merged[i * c + h * d + e] = (0..n).map(|j| ex[j] / z * vv.v[j * c + h * d + e]).sum();
                }
            }
        }
        let mm = Map { h: x.h, w: x.w, c, v: merged };
        linear(s, &format!("{name}.output"), &mm, c)
    }

    pub fn aglf(s: &ParamStore<f64>, name: &str, f: &Map, heads: usize) -> Map {
        let c = f.c;
        let alpha = p(s, &format!("{name}.alpha"))[0];
        let beta = p(s, &format!("{name}.beta"))[0];
        let n1 = layer_norm(s, &format!("{name}.norm1"), f);
        let g = attention(s, &format!("{name}.attn"), &n1, heads);
        let l = conv(s, &format!("{name}.local2"), &gelu(&conv(s, &format!("{name}.local1"), &n1, 3, 1, c)), 3, 1, c);
        let u: Vec<f64> = (0..f.v.len()).map(|i| f.v[i] + alpha * g.v[i] + beta * l.v[i]).collect();
        let um = Map { h: f.h, w: f.w, c, v: u };
        let n2 = layer_norm(s, &format!("{name}.norm2"), &um);
        let ff = linear(s, &format!("{name}.ffn2"), &gelu(&linear(s, &format!("{name}.ffn1"), &n2, 4 * c)), c);
        Map {
            h: f.h,
            w: f.w,
            c,
            v: um.v.iter().zip(&ff.v).map(|(a, b)| a + b).collect(),
        }
    }

    /// Adaptive average pooling with PyTorch-style bin boundaries and nearest
    /// upsampling back, concatenated after the input, then a 1x1 fuse.
    pub fn spp(s: &ParamStore<f64>, name: &str, x: &Map) -> Map {
        let mut cat = Vec::new();
        for y in 0..x.h {
            for xx in 0..x.w {
                for ch in 0..x.c {
                    cat.push(x.at(y, xx, ch));
                }
                for scale in [1usize, 2, 4, 8] {
                    let cy = y * scale / x.h;
                    let cx = xx * scale / x.w;
                    let (y0, y1) = (cy * x.h / scale, ((cy + 1) * x.h).div_ceil(scale));
                    let (x0, x1) = (cx * x.w / scale, ((cx + 1) * x.w).div_ceil(scale));
                    for ch in 0..x.c {
                        let mut acc = 0.0;
                        for a in y0..y1 {
                            for b in x0..x1 {
                                acc += x.at(a, b, ch);
                            }
                        }
                        cat.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                    }
                }
            }
        }
        let cm = Map { h: x.h, w: x.w, c: 5 * x.c, v: cat };
        linear(s, &format!("{name}.fuse"), &cm, x.c)
    }
}

// ---------------------------------------------------------------------------
// Gradient checks, one block type at a time.

#[test]
fn conv_gradients_match_finite_differences() {
    for (stride, k) in [(1, 3), (2, 3), (1, 7)] {
        let mut store = ParamStore::new();
        let conv = Conv2d::build(&mut store, &mut Initializer::new(1), "c", k, stride, 3, 2).unwrap();
        scramble(&mut store, 2, 0.5);
        gradient_check(&conv, &mut store, &random_map(5, 6, 3, 3, -1.0, 1.0), 4);
    }
}

#[test]
fn linear_layernorm_gelu_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let lin = Linear::build(&mut store, &mut Initializer::new(1), "l", 4, 3).unwrap();
    scramble(&mut store, 2, 0.5);
    gradient_check(&lin, &mut store, &random_map(2, 3, 4, 3, -1.0, 1.0), 4);

    let mut store = ParamStore::new();
    let ln = LayerNorm::build(&mut store, "n", 5).unwrap();
    scramble(&mut store, 5, 1.0);
    gradient_check(&ln, &mut store, &random_map(2, 2, 5, 6, -2.0, 2.0), 7);

    let mut store = ParamStore::new();
    gradient_check(&Gelu, &mut store, &random_map(3, 3, 2, 8, -3.0, 3.0), 9);
}

#[test]
fn spatial_attention_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let sa = SpatialAttention::build(&mut store, &mut Initializer::new(1), "sa").unwrap();
    scramble(&mut store, 2, 0.3);
    gradient_check(&sa, &mut store, &random_map(4, 5, 3, 3, -1.0, 1.0), 4);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let attn = SelfAttention::build(&mut store, &mut Initializer::new(1), "a", 4).unwrap();
    scramble(&mut store, 2, 0.6);
    gradient_check(&attn, &mut store, &random_map(2, 3, 4, 3, -1.0, 1.0), 4);
}

#[test]
fn aglf_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let block = AglfBlock::build(&mut store, &mut Initializer::new(1), "b", 4).unwrap();
    scramble(&mut store, 2, 0.5);
    gradient_check(&block, &mut store, &random_map(3, 3, 4, 3, -1.0, 1.0), 4);
}

#[test]
fn spp_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let spp = Spp::build(&mut store, &mut Initializer::new(1), "s", 2).unwrap();
    scramble(&mut store, 2, 0.5);
    gradient_check(&spp, &mut store, &random_map(5, 6, 2, 3, -1.0, 1.0), 4);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let arch = ArchDescriptor::new(1, 4, 2).unwrap();
    let model = EncoderModel::<f64>::init(7, arch).unwrap();
    let net = model.net().clone();
    let mut store = model.into_params();
    scramble(&mut store, 8, 0.4);
    let x = FeatureMap::from_image(&random_image(8, 8, 9));
    gradient_check(&net, &mut store, &x, 10);
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let arch = ArchDescriptor::new(1, 4, 2).unwrap();
    for (i, kind) in [DecoderKind::Reconstruction, DecoderKind::Deraining, DecoderKind::Recognition]
        .into_iter()
        .enumerate()
    {
        let model = DecoderModel::<f64>::init(i as u64, kind, arch).unwrap();
        let net = model.net().clone();
        let mut store = model.into_params();
        scramble(&mut store, 20 + i as u64, 0.4);
        gradient_check(&net, &mut store, &random_map(4, 4, 4, 30 + i as u64, -1.0, 1.0), 40);
    }
}

#[test]
fn bias_gradient_of_half_squared_norm() {
    // out = W x + b on one token; d(0.5 ||out||^2)/db = out
    let mut store = ParamStore::new();
    let lin = Linear::build(&mut store, &mut Initializer::new(3), "l", 2, 2).unwrap();
    store.by_name_mut("l.weight").unwrap().value = vec![1.0, 2.0, -1.0, 0.5];
    store.by_name_mut("l.bias").unwrap().value = vec![0.25, -0.5];
    let x = FeatureMap::new(1, 1, 2, vec![2.0, 1.0]);
    let (out, cache) = lin.forward(&store, &x);
    // out = [2*1 + 1*(-1) + 0.25, 2*2 + 1*0.5 - 0.5] = [1.25, 4.0]
    assert_eq!(out.data(), &[1.25, 4.0]);
    let mut grads = Gradients::for_store(&store);
    lin.backward(&store, &cache, &out, &mut grads);
    assert_eq!(grads.get(lin.bias), &[1.25, 4.0]);
    assert_eq!(grads.get(lin.weight), &[2.5, 8.0, 1.25, 4.0]);
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let arch = ArchDescriptor::new(1, 4, 2).unwrap();
    let enc = EncoderModel::<f64>::init(1, arch).unwrap();
    let (out, cache) = enc.forward_cached(&FeatureMap::from_image(&random_image(8, 8, 2))).unwrap();
    // MSE against itself: dL/dout = 2 (out - out) = 0
    let dy = FeatureMap::zeros(out.height(), out.width(), out.channels());
    let mut grads = Gradients::for_store(enc.params());
    let dx = enc.backward(&cache, &dy, &mut grads);
    assert!(dx.data().iter().all(|&v| v == 0.0));
    let mut store = enc.params().clone();
    store.accumulate(&grads);
    assert!(!store.has_nonzero_grad());
}

#[test]
fn gradients_accumulate_additively_across_a_batch() {
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::build(&mut store, &mut Initializer::new(4), "l", 3, 2).unwrap();
    let a = random_map(1, 2, 3, 1, -1.0, 1.0);
    let b = random_map(1, 2, 3, 2, -1.0, 1.0);
    let r = random_map(1, 2, 2, 3, -1.0, 1.0);
    let run = |x: &FeatureMap<f64>| {
        let (_, c) = lin.forward(&store, x);
        let mut g = Gradients::for_store(&store);
        lin.backward(&store, &c, &r, &mut g);
        g
    };
    let ga = run(&a);
    let gb = run(&b);
    let mut joint = Gradients::for_store(&store);
    for x in [&a, &b] {
        let (_, c) = lin.forward(&store, x);
        lin.backward(&store, &c, &r, &mut joint);
    }
    for (i, ((&j, &x), &y)) in joint.get(lin.weight).iter().zip(ga.get(lin.weight)).zip(gb.get(lin.weight)).enumerate() {
        assert!((j - (x + y)).abs() < 1e-12, "weight[{i}]");
    }
}

#[test]
fn backward_without_forward_is_a_state_error() {
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::build(&mut store, &mut Initializer::new(1), "l", 2, 2).unwrap();
    let mut tape = Tape::new(&lin, &store);
    let mut grads = Gradients::for_store(&store);
    let dy = FeatureMap::zeros(1, 1, 2);
    assert!(matches!(tape.backward(&dy, &mut grads), Err(NetError::State(_))));
    tape.forward(&FeatureMap::filled(1, 1, 2, 0.5));
    assert!(tape.backward(&dy, &mut grads).is_ok());
    assert!(matches!(tape.backward(&dy, &mut grads), Err(NetError::State(_))));
}

// ---------------------------------------------------------------------------
// Initialization and parameter counts.

#[test]
fn same_seed_gives_identical_parameters() {
    let arch = ArchDescriptor::new(2, 8, 4).unwrap();
    let a = EncoderModel::<f32>::init(42, arch).unwrap();
    let b = EncoderModel::<f32>::init(42, arch).unwrap();
    let bits = |m: &EncoderModel<f32>| -> Vec<u32> { m.params().iter().flat_map(|p| p.value.iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&a), bits(&b));
    let c = EncoderModel::<f32>::init(43, arch).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn default_encoder_parameter_count_matches_closed_form() {
    let c = 32usize;
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let lin = |i: usize, o: usize| i * o + o;
    let block = 2 * c + 4 * lin(c, c) + 2 * conv(3, c, c) + 2 + 2 * c + lin(c, 4 * c) + lin(4 * c, c);
    let expected = conv(3, 3, c) + conv(3, c, c) + conv(7, 2, 1) + 9 * block;
    assert_eq!(expected, 291_061);

    let arch = ArchDescriptor::default();
    assert_eq!((arch.depth, arch.base_channels, arch.downsampling), (9, 32, 4));
    let model = EncoderModel::<f32>::init(0, arch).unwrap();
    assert_eq!(model.params().num_scalars(), expected);
    assert_eq!(arch.encoder_param_count(), expected);
}

#[test]
fn fusion_weights_start_at_one_and_zero() {
    let arch = ArchDescriptor::new(3, 8, 2).unwrap();
    let model = EncoderModel::<f32>::init(5, arch).unwrap();
    for i in 0..3 {
        assert_eq!(model.params().by_name(&format!("blocks.{i}.alpha")).unwrap().value, vec![1.0]);
        assert_eq!(model.params().by_name(&format!("blocks.{i}.beta")).unwrap().value, vec![0.0]);
    }
}

#[test]
fn initial_weights_are_truncated_at_two_sigma() {
    let model = EncoderModel::<f64>::init(9, ArchDescriptor::default()).unwrap();
    let w = &model.params().by_name("blocks.0.ffn1.weight").unwrap().value;
    assert!(w.iter().all(|v| v.abs() <= 0.04));
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    // a normal truncated at ±2σ keeps about 88% of σ
    assert!((std - 0.0176).abs() < 0.001, "std {std}");

    let c = ArchDescriptor::default().base_channels;
    let w = &model.params().by_name("blocks.0.local1.weight").unwrap().value;
    let sigma = Conv2d::init_std(3, c);
    assert_eq!(sigma, 1.0 / (27.0 * c as f64).sqrt());
    assert!(w.iter().all(|v| v.abs() <= 2.0 * sigma));
    let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
    assert!((std / sigma - 0.88).abs() < 0.03, "std {std} vs {sigma}");
}

// ---------------------------------------------------------------------------
// Spatial attention.

#[test]
fn spatial_attention_examples() {
    let mut store = ParamStore::<f64>::new();
    let sa = SpatialAttention::build(&mut store, &mut Initializer::new(2), "sa").unwrap();
    scramble(&mut store, 3, 1.0);
    let zero = FeatureMap::zeros(5, 5, 3);
    assert!(sa.infer(&store, &zero).data().iter().all(|&v| v == 0.0));

    let f = random_map(6, 6, 3, 4, -5.0, 5.0);
    let mask = sa.mask(&store, &f);
    assert!(mask.data().iter().all(|&m| m > 0.0 && m < 1.0));

    // single pixel, single channel: only the kernel centre taps touch data
    let mut store = ParamStore::<f64>::new();
    let sa = SpatialAttention::build(&mut store, &mut Initializer::new(2), "sa").unwrap();
    let centre = 3 * 7 + 3;
    store.by_name_mut("sa.conv.weight").unwrap().value[centre * 2] = 0.8;
    store.by_name_mut("sa.conv.weight").unwrap().value[centre * 2 + 1] = -0.3;
    store.by_name_mut("sa.conv.bias").unwrap().value = vec![0.1];
    let x = 0.6;
    let out = sa.infer(&store, &FeatureMap::new(1, 1, 1, vec![x]));
    let expected = x / (1.0 + (-(0.8 * x - 0.3 * x + 0.1f64)).exp());
    assert!((out.data()[0] - expected).abs() < 1e-12);
}

// ---------------------------------------------------------------------------
// AGLF block.

#[test]
fn aglf_is_identity_with_zero_fusion_and_zero_feed_forward() {
    let mut store = ParamStore::<f64>::new();
    let block = AglfBlock::build(&mut store, &mut Initializer::new(3), "b", 4).unwrap();
    store.by_name_mut("b.alpha").unwrap().value = vec![0.0];
    store.by_name_mut("b.beta").unwrap().value = vec![0.0];
    for name in ["b.ffn2.weight", "b.ffn2.bias"] {
        store.by_name_mut(name).unwrap().value.iter_mut().for_each(|v| *v = 0.0);
    }
    let f = random_map(3, 4, 4, 5, -1.0, 1.0);
    assert_eq!(block.infer(&store, &f).data(), f.data());
}

#[test]
fn two_token_attention_by_hand() {
    // q = k = [[1, 0], [0, 1]], v = [[1, 2], [3, 4]], d = 2
    // scores / sqrt(2): row 0 = [1/√2, 0], row 1 = [0, 1/√2]
    let q = [1.0, 0.0, 0.0, 1.0];
    let v = [1.0, 2.0, 3.0, 4.0];
    let (out, probs) = attention_head(&q, &q, &v, 2, 2);
    let s = 1.0 / 2f64.sqrt();
    let p_hi = s.exp() / (s.exp() + 1.0);
    let p_lo = 1.0 - p_hi;
    let expected_probs = [p_hi, p_lo, p_lo, p_hi];
    for (a, b) in probs.iter().zip(expected_probs) {
        assert!((a - b).abs() < 1e-12);
    }
    let expected = [p_hi + 3.0 * p_lo, 2.0 * p_hi + 4.0 * p_lo, p_lo + 3.0 * p_hi, 2.0 * p_lo + 4.0 * p_hi];
    for (a, b) in out.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn aglf_matches_scalar_oracle() {
    let mut store = ParamStore::<f64>::new();
    let block = AglfBlock::build(&mut store, &mut Initializer::new(3), "b", 4).unwrap();
    scramble(&mut store, 4, 0.5);
    let f = random_map(3, 3, 4, 5, -1.0, 1.0);
    let got = block.infer(&store, &f);
    let want = oracle::aglf(&store, "b", &oracle::Map::of(&f), 4);
    for (a, b) in got.data().iter().zip(&want.v) {
        assert!((a - b).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------------------
// SPP.

#[test]
fn spp_constant_input_gives_constant_output() {
    let mut store = ParamStore::<f64>::new();
    let spp = Spp::build(&mut store, &mut Initializer::new(1), "s", 3).unwrap();
    scramble(&mut store, 2, 0.5);
    let out = spp.infer(&store, &FeatureMap::filled(6, 10, 3, 0.4));
    assert_eq!(out.shape(), (6, 10, 3));
    for tok in out.data().chunks(3) {
        for (a, b) in tok.iter().zip(&out.data()[..3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn scale_two_pooling_averages_blocks() {
    let f = FeatureMap::new(4, 4, 1, (0..16).map(|v| v as f64).collect());
    let p = adaptive_avg_pool(&f, 2);
    // top-left block {0, 1, 4, 5}, top-right {2, 3, 6, 7}, ...
    assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn spp_matches_scalar_oracle_on_uneven_grid() {
    let mut store = ParamStore::<f64>::new();
    let spp = Spp::build(&mut store, &mut Initializer::new(1), "s", 2).unwrap();
    scramble(&mut store, 3, 0.5);
    let f = random_map(5, 3, 2, 4, -1.0, 1.0);
    let got = spp.infer(&store, &f);
    let want = oracle::spp(&store, "s", &oracle::Map::of(&f));
    for (a, b) in got.data().iter().zip(&want.v) {
        assert!((a - b).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Encoder and decoders.

#[test]
fn encoder_shape_and_determinism() {
    let arch = ArchDescriptor::new(1, 8, 4).unwrap();
    let enc = EncoderModel::<f32>::init(1, arch).unwrap();
    let img = random_image(16, 24, 3);
    let a = enc.forward(&img).unwrap();
    let b = enc.forward(&img).unwrap();
    assert_eq!(a.shape(), (4, 6, 8));
    assert_eq!(a.data(), b.data());
    assert!(a.is_finite());

    let err = enc.forward(&random_image(18, 24, 1)).unwrap_err();
    assert!(matches!(err, NetError::Shape(ref m) if m.contains("multiple of 4")));
}

#[test]
fn default_encoder_output_shape_at_crop_size() {
    // shape arithmetic only; full attention over 4096 tokens is exercised elsewhere
    let arch = ArchDescriptor::default();
    let enc = EncoderModel::<f32>::init(0, arch).unwrap();
    let (h, w) = enc.net().proj.iter().fold((256, 256), |(h, w), c| c.output_size(h, w));
    assert_eq!((h, w, arch.base_channels), (64, 64, 32));
}

#[test]
fn tiny_encoder_matches_layer_by_layer_oracle() {
    let arch = ArchDescriptor::new(1, 4, 4).unwrap();
    let mut enc = EncoderModel::<f64>::init(11, arch).unwrap();
    scramble(enc.params_mut(), 12, 0.5);
    let img = random_image(8, 8, 13);
    let got = enc.forward(&img).unwrap();

    let s = enc.params();
    let x = oracle::Map::of(&FeatureMap::from_image(&img));
    let h = oracle::gelu(&oracle::conv(s, "proj.0", &x, 3, 2, 4));
    let h = oracle::conv(s, "proj.1", &h, 3, 2, 4);
    let h = oracle::spatial_attention(s, "spatial_attention", &h);
    let h = oracle::aglf(s, "blocks.0", &h, 4);
    assert_eq!(got.shape(), (h.h, h.w, h.c));
    for (a, b) in got.data().iter().zip(&h.v) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn tiny_decoder_matches_layer_by_layer_oracle() {
    let arch = ArchDescriptor::new(1, 4, 2).unwrap();
    let mut dec = DecoderModel::<f64>::init(3, DecoderKind::Reconstruction, arch).unwrap();
    scramble(dec.params_mut(), 4, 0.5);
    let f = random_map(2, 2, 4, 5, -1.0, 1.0);
    let got = dec.forward(&f).unwrap();
    assert_eq!(got.shape(), (4, 4, 3));

    let s = dec.params();
    let up = oracle::linear(s, "upsample", &oracle::Map::of(&f), 16);
    // pixel shuffle: channel block (i*2 + j)*4 feeds sub-pixel (i, j)
    let mut sh = vec![0.0; 4 * 4 * 4];
    for y in 0..2 {
        for x in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    for c in 0..4 {
                        sh[((y * 2 + i) * 4 + x * 2 + j) * 4 + c] = up.at(y, x, (i * 2 + j) * 4 + c);
                    }
                }
            }
        }
    }
    let sh = oracle::Map { h: 4, w: 4, c: 4, v: sh };
    let out = oracle::conv(s, "head", &oracle::spp(s, "spp", &sh), 3, 1, 3);
    for (a, b) in got.data().iter().zip(&out.v) {
        assert!((a - oracle::sigmoid(*b)).abs() < 1e-12);
    }
}

#[test]
fn image_decoder_restores_resolution_in_unit_range() {
    let arch = ArchDescriptor::new(1, 8, 4).unwrap();
    let enc = EncoderModel::<f32>::init(1, arch).unwrap();
    for kind in [DecoderKind::Reconstruction, DecoderKind::Deraining] {
        let dec = DecoderModel::<f32>::init(2, kind, arch).unwrap();
        let img = random_image(16, 20, 3);
        let out = dec.decode_image(&enc.forward(&img).unwrap()).unwrap();
        assert_eq!((out.height(), out.width()), (16, 20));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn recognition_decoder_examples() {
    let arch = ArchDescriptor::new(1, 4, 2).unwrap();
    let mut dec = DecoderModel::<f64>::init(1, DecoderKind::Recognition, arch).unwrap();
    scramble(dec.params_mut(), 2, 1.0);
    let f = random_map(4, 4, 4, 3, -3.0, 3.0);
    let o = dec.decode_scalar(&f).unwrap();
    assert!(o > 0.0 && o < 1.0);

    // global average pooling is blind to where features sit when every
    // pyramid branch is itself location-free; with a 1x1 map that is exact
    let g = random_map(1, 1, 4, 4, -1.0, 1.0);
    let tiled = FeatureMap::new(3, 3, 4, g.data().repeat(9));
    let a = dec.decode_scalar(&tiled).unwrap();
    let b = dec.decode_scalar(&g).unwrap();
    assert!((a - b).abs() < 1e-12);

    let b_val = 0.7;
    for p in dec.params_mut().iter_mut() {
        if p.name == "head.weight" {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        if p.name == "head.bias" {
            p.value = vec![b_val];
        }
    }
    let z = dec.decode_scalar(&FeatureMap::zeros(2, 2, 4)).unwrap();
    assert!((z - 1.0 / (1.0 + (-b_val).exp())).abs() < 1e-15);
}

#[test]
fn recognition_output_ignores_spatial_permutation_of_pooled_features() {
    // swapping the two halves of a 2x1 map permutes locations while keeping
    // every pyramid cell's mean set identical
    let arch = ArchDescriptor::new(1, 4, 2).unwrap();
    let mut dec = DecoderModel::<f64>::init(3, DecoderKind::Recognition, arch).unwrap();
    scramble(dec.params_mut(), 4, 1.0);
    let f = random_map(1, 2, 4, 5, -1.0, 1.0);
    let mut swapped = f.data()[4..].to_vec();
    swapped.extend_from_slice(&f.data()[..4]);
    let g = FeatureMap::new(1, 2, 4, swapped);
    let a = dec.decode_scalar(&f).unwrap();
    let b = dec.decode_scalar(&g).unwrap();
    assert!((a - b).abs() < 1e-12);
}

// ---------------------------------------------------------------------------
// Checkpoints.

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let arch = ArchDescriptor::new(2, 8, 4).unwrap();
    let enc = EncoderModel::<f32>::init(1, arch).unwrap();
    let dec = DecoderModel::<f32>::init(2, DecoderKind::Deraining, arch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    Checkpoint::new("finetune", 17, &enc, Some(&dec)).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.stage, "finetune");
    assert_eq!(back.step, 17);
    assert_eq!(back.arch, arch);
    assert_eq!(back.decoder_kind(), Some(DecoderKind::Deraining));

    let img = random_image(16, 16, 3);
    let f1 = enc.forward(&img).unwrap();
    let f2 = back.encoder_model().unwrap().forward(&img).unwrap();
    let bits = |f: &FeatureMap<f32>| f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&f1), bits(&f2));
    let o1 = dec.forward(&f1).unwrap();
    let o2 = back.decoder_model().unwrap().forward(&f2).unwrap();
    assert_eq!(bits(&o1), bits(&o2));
}

#[test]
fn checkpoint_rejects_mismatched_architecture() {
    let arch = ArchDescriptor::new(1, 8, 4).unwrap();
    let enc = EncoderModel::<f32>::init(1, arch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    Checkpoint::new("recog", 1, &enc, None).save(&path).unwrap();
    let other = ArchDescriptor::new(2, 8, 4).unwrap();
    assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(NetError::Checkpoint(_))));
    assert!(Checkpoint::load_expecting(&path, &arch).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(NetError::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(NetError::Checkpoint(_))));
}

#[test]
fn encoders_are_structurally_interchangeable() {
    let arch = ArchDescriptor::new(2, 8, 2).unwrap();
    let recog = EncoderModel::<f32>::init(1, arch).unwrap();
    let mut student = EncoderModel::<f32>::init(2, arch).unwrap();
    student.params_mut().load_values(recog.params()).unwrap();
    let img = random_image(8, 8, 1);
    assert_eq!(recog.forward(&img).unwrap().data(), student.forward(&img).unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_contracts_hold(depth in 1usize..3, c in 1usize..6, log_f in 0u32..3, hm in 1usize..4, wm in 1usize..4, seed in 0u64..1000) {
        let f = 1usize << log_f;
        let arch = ArchDescriptor::new(depth, c, f).unwrap();
        let enc = EncoderModel::<f32>::init(seed, arch).unwrap();
        let (h, w) = (hm * f, wm * f);
        let img = random_image(h, w, seed);
        let feats = enc.forward(&img).unwrap();
        prop_assert_eq!(feats.shape(), (hm, wm, c));
        prop_assert!(feats.is_finite());
        let dec = DecoderModel::<f32>::init(seed + 1, DecoderKind::Reconstruction, arch).unwrap();
        let out = dec.forward(&feats).unwrap();
        prop_assert_eq!(out.shape(), (h, w, 3));
        prop_assert!(out.is_finite());
        let rec = DecoderModel::<f32>::init(seed + 2, DecoderKind::Recognition, arch).unwrap();
        let s = rec.decode_scalar(&feats).unwrap();
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn spp_and_aglf_preserve_shape(h in 1usize..6, w in 1usize..6, c in 1usize..5, seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(seed);
        let spp = Spp::build(&mut store, &mut init, "s", c).unwrap();
        let block = AglfBlock::build(&mut store, &mut init, "b", c).unwrap();
        let f = random_map(h, w, c, seed, 0.0, 1.0);
        prop_assert_eq!(spp.infer(&store, &f).shape(), (h, w, c));
        let out = block.infer(&store, &f);
        prop_assert_eq!(out.shape(), (h, w, c));
        prop_assert!(out.is_finite());
    }
}
