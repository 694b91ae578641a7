use cipher_vit::autodiff::{Tape, Tensor};
use cipher_vit::crypto::{
    derive_permutation, encrypt_image, permute_embedding_columns, EncryptionKey,
};
use cipher_vit::image::ImageTensor;
use cipher_vit::lora::{inject, lora_forward, merged_model, LoraConfig};
use cipher_vit::vit::{
    attention_block, patch_embed_tensor, BlockVars, FloatImage, ViTConfig, ViTModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Plain-loop reference math on row-major f64 buffers.

fn linear(x: &[f64], rows: usize, w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    let d_in = x.len() / rows;
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..d_in {
                s += x[r * d_in + i] * w[o * d_in + i];
            }
            y[r * d_out + o] = s;
        }
    }
    y
}

fn layer_norm(x: &[f64], rows: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() / rows;
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for i in 0..d {
            y[r * d + i] = (row[i] - mean) / (var + 1e-6).sqrt() * g[i] + b[i];
        }
    }
    y
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `x Wᵀ + b + s·(x Aᵀ) Bᵀ` with the low-rank product expanded densely.
fn dense_lora(
    x: &[f64],
    rows: usize,
    w: &[f64],
    b: &[f64],
    a: &[f64],
    bb: &[f64],
    s: f64,
    r: usize,
) -> Vec<f64> {
    let d_out = b.len();
    let d_in = w.len() / d_out;
    let mut eff = w.to_vec();
    for o in 0..d_out {
        for i in 0..d_in {
            let mut acc = 0.0;
            for k in 0..r {
                acc += bb[o * r + k] * a[k * d_in + i];
            }
            eff[o * d_in + i] += s * acc;
        }
    }
    linear(x, rows, &eff, Some(b), d_out)
}

struct Ref<'a> {
    model: &'a ViTModel<f64>,
}

impl Ref<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.model.get(name).unwrap().data()
    }

    fn projection(&self, x: &[f64], rows: usize, block: usize, which: char) -> Vec<f64> {
        let pre = format!("blocks.{block}.attn");
        let w = self.p(&format!("{pre}.w_{which}"));
        let b = self.p(&format!("{pre}.b_{which}"));
        let a_name = format!("lora.{pre}.w_{which}.a");
        match self.model.lora() {
            Some(cfg) if self.model.contains(&a_name) => {
                let b_name = format!("lora.{pre}.w_{which}.b");
                dense_lora(
                    x,
                    rows,
                    w,
                    b,
                    self.p(&a_name),
                    self.p(&b_name),
                    cfg.alpha / cfg.rank as f64,
                    cfg.rank,
                )
            }
            _ => linear(x, rows, w, Some(b), b.len()),
        }
    }

    /// One pre-norm block over `rows × d` tokens, heads computed one at a time.
    fn block(&self, x: &[f64], rows: usize, block: usize, heads: usize) -> Vec<f64> {
        let d = x.len() / rows;
        let dh = d / heads;
        let pre = format!("blocks.{block}");
        let h = layer_norm(
            x,
            rows,
            self.p(&format!("{pre}.norm1.weight")),
            self.p(&format!("{pre}.norm1.bias")),
        );
        let q = self.projection(&h, rows, block, 'q');
        let k = self.projection(&h, rows, block, 'k');
        let v = self.projection(&h, rows, block, 'v');
        let mut ctx = vec![0.0; rows * d];
        for head in 0..heads {
            let off = head * dh;
            for i in 0..rows {
                let scores: Vec<f64> = (0..rows)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i * d + off + c] * k[j * d + off + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    ctx[i * d + off + c] = (0..rows).map(|j| e[j] / z * v[j * d + off + c]).sum();
                }
            }
        }
        let wo = self.p(&format!("{pre}.attn.w_o"));
        let x1 = add(
            x,
            &linear(&ctx, rows, wo, Some(self.p(&format!("{pre}.attn.b_o"))), d),
        );
        let h2 = layer_norm(
            &x1,
            rows,
            self.p(&format!("{pre}.norm2.weight")),
            self.p(&format!("{pre}.norm2.bias")),
        );
        let fc1b = self.p(&format!("{pre}.mlp.fc1.bias"));
        let f = linear(
            &h2,
            rows,
            self.p(&format!("{pre}.mlp.fc1.weight")),
            Some(fc1b),
            fc1b.len(),
        );
        let f: Vec<f64> = f.into_iter().map(gelu).collect();
        let out = linear(
            &f,
            rows,
            self.p(&format!("{pre}.mlp.fc2.weight")),
            Some(self.p(&format!("{pre}.mlp.fc2.bias"))),
            d,
        );
        add(&x1, &out)
    }

    fn logits(&self, img: &FloatImage<f64>) -> Vec<f64> {
        let cfg = self.model.config();
        let (p, s, d) = (cfg.patch_size, cfg.image_size, cfg.embed_dim);
        let grid = s / p;
        let mut tokens = self.p("cls_token").to_vec();
        for by in 0..grid {
            for bx in 0..grid {
                let mut patch = Vec::new();
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            patch.push(img.data[c * s * s + (by * p + y) * s + bx * p + x]);
                        }
                    }
                }
                tokens.extend(linear(
                    &patch,
                    1,
                    self.p("patch_embed.weight"),
                    Some(self.p("patch_embed.bias")),
                    d,
                ));
            }
        }
        let rows = grid * grid + 1;
        let mut x = add(&tokens, self.p("pos_embed"));
        for b in 0..cfg.depth {
            x = self.block(&x, rows, b, cfg.num_heads);
        }
        let x = layer_norm(&x, rows, self.p("norm.weight"), self.p("norm.bias"));
        linear(
            &x[..d],
            1,
            self.p("head.weight"),
            Some(self.p("head.bias")),
            cfg.num_classes,
        )
    }
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> FloatImage<f64> {
    FloatImage::new(
        side,
        side,
        (0..3 * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn randomize_adapters(model: &mut ViTModel<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in model.iter_mut() {
        if name.starts_with("lora.") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

#[test]
fn attention_block_matches_per_head_loops() {
    let cfg = ViTConfig {
        image_size: 4,
        patch_size: 2,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_dim: 16,
        num_classes: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = ViTModel::<f64>::init(cfg, &mut rng).unwrap();
    for (_, t) in model.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let x: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::no_grad();
    let params = model.bind(&mut tape);
    let xv = tape.constant(vec![3, 8], x.clone()).unwrap();
    let vars = BlockVars::from_params(&params, 0, None).unwrap();
    let out = attention_block(&mut tape, xv, &vars, 2).unwrap();
    let expected = Ref { model: &model }.block(&x, 3, 0, 2);
    assert_eq!(tape.shape(out), &[3, 8]);
    assert!(max_rel(tape.value(out), &expected) < 1e-12);
}

#[test]
fn lora_forward_matches_dense_expansion() {
    let (l, d, r) = (3, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut gen = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (x, w, b, a, bb) = (gen(l * d), gen(d * d), gen(d), gen(r * d), gen(d * r));
    let mut tape = Tape::no_grad();
    let xv = tape.constant(vec![l, d], x.clone()).unwrap();
    let wv = tape.constant(vec![d, d], w.clone()).unwrap();
    let bv = tape.constant(vec![d], b.clone()).unwrap();
    let av = tape.constant(vec![r, d], a.clone()).unwrap();
    let bbv = tape.constant(vec![d, r], bb.clone()).unwrap();
    let out = lora_forward(&mut tape, xv, wv, Some(bv), av, bbv, 4.0, r).unwrap();
    let expected = dense_lora(&x, l, &w, &b, &a, &bb, 2.0, r);
    assert!(max_rel(tape.value(out), &expected) < 1e-12);
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model = ViTModel::<f64>::init(ViTConfig::toy(5), &mut rng).unwrap();
    inject(&mut model, &LoraConfig::with_rank(4), &mut rng).unwrap();
    randomize_adapters(&mut model, &mut rng);
    let single = {
        let mut m = ViTModel::<f32>::zeros(ViTConfig::toy(5)).unwrap();
        inject(&mut m, &LoraConfig::with_rank(4), &mut rng).unwrap();
        for (name, t) in model.iter() {
            let cast: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
            m.set_data(name, &cast).unwrap();
        }
        m
    };
    for _ in 0..5 {
        let img = random_image(&mut rng, 16);
        let expected = Ref { model: &model }.logits(&img);
        let got = model.logits(&img).unwrap();
        assert!(max_rel(&got, &expected) < 1e-10);

        let img32 = FloatImage::new(16, 16, img.data.iter().map(|&v| v as f32).collect()).unwrap();
        let got32: Vec<f64> = single
            .logits(&img32)
            .unwrap()
            .iter()
            .map(|&v| v as f64)
            .collect();
        assert!(
            max_rel(&got32, &expected) < 1e-5,
            "f32 drift {}",
            max_rel(&got32, &expected)
        );
    }
}

#[test]
fn adapters_are_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let base = ViTModel::<f32>::init(ViTConfig::toy(4), &mut rng).unwrap();
    let mut adapted = base.clone();
    inject(&mut adapted, &LoraConfig::with_rank(8), &mut rng).unwrap();
    for _ in 0..10 {
        let img = FloatImage::new(
            16,
            16,
            (0..768).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        assert_eq!(base.logits(&img).unwrap(), adapted.logits(&img).unwrap());
    }
}

#[test]
fn merged_weights_reproduce_adapted_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model = ViTModel::<f64>::init(ViTConfig::toy(4), &mut rng).unwrap();
    inject(&mut model, &LoraConfig::with_rank(2), &mut rng).unwrap();
    randomize_adapters(&mut model, &mut rng);
    let merged = merged_model(&model).unwrap();
    assert!(merged.lora().is_none());
    assert!(!merged.names().any(|n| n.starts_with("lora.")));
    let mut plain = model.clone();
    cipher_vit::lora::eject(&mut plain);
    for _ in 0..5 {
        let img = random_image(&mut rng, 16);
        let a = model.logits(&img).unwrap();
        let m = merged.logits(&img).unwrap();
        assert!(max_rel(&m, &a) < 1e-5);
        assert_ne!(a, plain.logits(&img).unwrap());
    }
}

#[test]
fn permuted_columns_undo_block_encryption() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let key = EncryptionKey(rng.random());
        let perm = derive_permutation(key, 4).unwrap();
        let w = Tensor::<f64>::new(
            vec![16, 48],
            (0..768).map(|_| rng.random_range(-0.1..0.1)).collect(),
        )
        .unwrap();
        let b = Tensor::<f64>::new(
            vec![16],
            (0..16).map(|_| rng.random_range(-0.1..0.1)).collect(),
        )
        .unwrap();
        let img = ImageTensor::new(16, 16, (0..768).map(|_| rng.random()).collect()).unwrap();
        let enc = encrypt_image(&img, &perm).unwrap();

        let plain = patch_embed_tensor(&FloatImage::from_u8(&img), 4, &w, &b).unwrap();
        let w_enc = permute_embedding_columns(&w, &perm).unwrap();
        let compensated = patch_embed_tensor(&FloatImage::from_u8(&enc), 4, &w_enc, &b).unwrap();
        assert!(max_rel(compensated.data(), plain.data()) < 1e-12);

        let uncompensated = patch_embed_tensor(&FloatImage::from_u8(&enc), 4, &w, &b).unwrap();
        if !perm.is_identity() {
            assert!(max_rel(uncompensated.data(), plain.data()) > 1e-3);
        }
    }
}
