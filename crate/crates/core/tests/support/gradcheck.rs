//! Analytic gradients against central finite differences. Every check
//! returns the worst relative error it saw.

use std::sync::Arc;

use answerme_core::graph::{AttnLayout, AttnSegment, ConvGeometry};
use answerme_core::model::{AnswerMe, FusionKind, ModelConfig};
use answerme_core::raster::Raster;
use answerme_core::synth::FamilyKind;
use answerme_core::tasks::{EncodedExample, TaskTag};
use answerme_core::text::EOS;
use answerme_core::{Graph, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
pub const KERNEL_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const MODEL_COORDS: usize = 240;

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar objective: `sum(build(inputs) * r)` with a fixed random `r`.
fn objective(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let proj = random(g.value(out).shape(), &mut rng);
    let r = g.constant(proj);
    let prod = g.mul(out, r).unwrap();
    let root = g.sum(prod);
    (g, vars, root)
}

fn check_kernel(inputs: Vec<Tensor>, max_coords: usize, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let (mut g, vars, root) = objective(&inputs, &build);
    let grads = g.backward(root).unwrap();
    let eval = |inputs: &[Tensor]| {
        let (g, _, root) = objective(inputs, &build);
        g.value(root).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].len();
        for k in sample(&mut rng, n, n.min(max_coords)) {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric, 1e-4));
        }
    }
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

/// `(kernel, worst relative error)` for every differentiable kernel.
pub fn kernel_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &str, worst: f64| out.push((name.to_string(), worst));
    let mut r = rng();

    push("matmul", check_kernel(vec![random(&[3, 4], &mut r), random(&[4, 5], &mut r)], 64, |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    }));

    let (a, b, row) = (random(&[3, 4], &mut r), random(&[3, 4], &mut r), random(&[4], &mut r));
    push("add", check_kernel(vec![a.clone(), b.clone()], 64, |g, v| g.add(v[0], v[1]).unwrap()));
    push("add_row", check_kernel(vec![a.clone(), row], 64, |g, v| g.add_row(v[0], v[1]).unwrap()));
    push("mul", check_kernel(vec![a.clone(), b], 64, |g, v| g.mul(v[0], v[1]).unwrap()));
    push("scale", check_kernel(vec![a.clone()], 64, |g, v| g.scale(v[0], -1.7)));
    let wide = Tensor::from_fn(&[4, 6], |_| r.random_range(-4.0..4.0));
    push("gelu", check_kernel(vec![wide], 64, |g, v| g.gelu(v[0])));
    push("sum", check_kernel(vec![a.clone()], 64, |g, v| g.sum(v[0])));
    push("reshape", check_kernel(vec![a], 64, |g, v| g.reshape(v[0], vec![2, 6]).unwrap()));

    let x = Tensor::from_fn(&[4, 6], |_| r.random_range(-2.0..3.0));
    let gain = Tensor::from_fn(&[6], |_| r.random_range(0.5..1.5));
    let bias = random(&[6], &mut r);
    push("layernorm", check_kernel(vec![x, gain, bias], 64, |g, v| g.layernorm(v[0], v[1], v[2], 1e-5).unwrap()));

    push("embedding", check_kernel(vec![random(&[7, 4], &mut r)], 64, |g, v| {
        g.embedding(v[0], &[0, 3, 3, 6, 3]).unwrap()
    }));
    push("gather_rows", check_kernel(vec![random(&[5, 3], &mut r)], 64, |g, v| {
        g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap()
    }));
    let parts = vec![random(&[2, 3], &mut r), random(&[1, 3], &mut r), random(&[3, 3], &mut r)];
    push("concat_rows", check_kernel(parts, 64, |g, v| g.concat_rows(v).unwrap()));

    let layout = AttnLayout {
        heads: 2,
        causal: false,
        segments: vec![
            AttnSegment { q_start: 0, q_len: 2, k_start: 0, k_len: 3, buckets: buckets(2, 3, 3) },
            AttnSegment { q_start: 2, q_len: 3, k_start: 3, k_len: 3, buckets: buckets(3, 3, 3) },
        ],
    };
    let inputs = vec![
        random(&[5, 4], &mut r),
        random(&[6, 4], &mut r),
        random(&[6, 4], &mut r),
        random(&[3, 2], &mut r),
    ];
    push("attention+bias", check_kernel(inputs, 64, |g, v| {
        g.attention(v[0], v[1], v[2], Some(v[3]), layout.clone()).unwrap()
    }));

    let layout = AttnLayout {
        heads: 2,
        causal: true,
        segments: vec![
            AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3, buckets: None },
            AttnSegment { q_start: 3, q_len: 2, k_start: 3, k_len: 2, buckets: None },
        ],
    };
    let inputs = vec![random(&[5, 4], &mut r), random(&[5, 4], &mut r), random(&[5, 4], &mut r)];
    push("attention causal", check_kernel(inputs, 64, |g, v| {
        g.attention(v[0], v[1], v[2], None, layout.clone()).unwrap()
    }));

    for (stride, pad) in [(2, 1), (1, 0)] {
        let geom = ConvGeometry { batch: 2, in_h: 5, in_w: 5, in_c: 3, out_c: 4, kernel: 3, stride, pad };
        let inputs = vec![random(&[2, 5, 5, 3], &mut r), random(&[27, 4], &mut r), random(&[4], &mut r)];
        push(&format!("conv2d s{stride} p{pad}"), check_kernel(inputs, 80, |g, v| g.conv2d(v[0], v[1], v[2], geom).unwrap()));
    }

    push("cross_entropy", check_kernel(vec![random(&[4, 5], &mut r)], 64, |g, v| {
        g.softmax_cross_entropy(v[0], &[1, 0, 4, 2], 0).unwrap()
    }));

    let model = AnswerMe::new(tiny_config(FusionKind::ConcatEncoder), 0, 4).unwrap();
    let (a, b) = (noise_image(&mut r), noise_image(&mut r));
    let pixels = model.pixel_tensor(&[&a, &b]).unwrap();
    push("image encoder", check_kernel(vec![pixels], 150, |g, v| model.encode_images_on(g, v[0]).unwrap()));
    out
}

fn buckets(q: usize, k: usize, rows: u32) -> Option<Arc<[u32]>> {
    Some((0..q * k).map(|i| (i as u32 * 7 + 3) % rows).collect())
}

fn tiny_config(fusion_kind: FusionKind) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        image_height: 16,
        image_width: 16,
        conv_channels: vec![4, 4, 4],
        text_layers: 1,
        text_heads: 2,
        fusion_layers: 1,
        fusion_heads: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        ff_dim: 12,
        vocab_size: 20,
        max_text_len: 8,
        max_decode_len: 6,
        text_buckets: 4,
        max_distance: 6,
        fusion_kind,
        layernorm_eps: 1e-5,
    }
}

fn noise_image(r: &mut ChaCha8Rng) -> Raster {
    Raster::new(16, 16, (0..16 * 16 * 3).map(|_| r.random()).collect()).unwrap()
}

fn batch(r: &mut ChaCha8Rng) -> Vec<EncodedExample> {
    let tag = TaskTag::Family(FamilyKind::VqaAttr);
    vec![
        EncodedExample {
            images: vec![noise_image(r)],
            input_ids: vec![12, 13, 14],
            target_ids: vec![15, 16, EOS],
            tag,
        },
        EncodedExample {
            images: vec![noise_image(r), noise_image(r)],
            input_ids: vec![17, 12, 18, 19, 13],
            target_ids: vec![14, EOS],
            tag,
        },
    ]
}

pub struct ModelCheck {
    pub coords: usize,
    pub worst: f64,
    /// Parameter coordinate with the worst error.
    pub at: String,
}

/// Loss gradient of every parameter tensor of a tiny model (at least one
/// coordinate each, [`MODEL_COORDS`] in total).
pub fn model_check(fusion_kind: FusionKind) -> ModelCheck {
    let mut r = rng();
    let mut model = AnswerMe::new(tiny_config(fusion_kind), 0, 3).unwrap();
    // nudge the near-zero output projection so every stack carries signal
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        for x in model.params_mut().get_mut(id).data_mut() {
            *x += r.random_range(-0.05..0.05);
        }
    }
    let batch = batch(&mut r);
    let (mut g, loss) = model.loss_graph(&batch).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut coords = Vec::new();
    for &id in &ids {
        coords.push((id, r.random_range(0..model.params().get(id).len())));
    }
    while coords.len() < MODEL_COORDS {
        let id = ids[r.random_range(0..ids.len())];
        coords.push((id, r.random_range(0..model.params().get(id).len())));
    }
    let mut worst: (f64, String) = (0.0, String::new());
    let n = coords.len();
    for (id, k) in coords {
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[k]);
        let orig = model.params().get(id).data()[k];
        model.params_mut().get_mut(id).data_mut()[k] = orig + STEP;
        let up = model.forward_loss(&batch).unwrap();
        model.params_mut().get_mut(id).data_mut()[k] = orig - STEP;
        let down = model.forward_loss(&batch).unwrap();
        model.params_mut().get_mut(id).data_mut()[k] = orig;
        let err = rel_err(analytic, (up - down) / (2.0 * STEP), 1e-5);
        if err > worst.0 {
            worst = (err, format!("{}[{k}]", model.params().name(id)));
        }
    }
    ModelCheck { coords: n, worst: worst.0, at: worst.1 }
}

