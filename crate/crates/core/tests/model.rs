mod support;

use answerme_core::mixture::predict;
use answerme_core::model::{AnswerMe, FusionKind, ModelConfig, Prompt, Segment};
use answerme_core::raster::Raster;
use answerme_core::synth::FamilyKind;
use answerme_core::tasks::{EncodedExample, PretrainTask, TaskTag};
use answerme_core::text::{TokenSeq, EOS};
use answerme_core::Error;
use support::sanity::{self, examples, model, vocab};

fn seq(ids: &[u32]) -> TokenSeq {
    TokenSeq::new(ids.to_vec(), &vocab()).unwrap()
}

#[test]
fn image_encoder_shapes_and_determinism() {
    let m = model(FusionKind::ConcatEncoder, 1);
    let img = examples(FamilyKind::Count, 1, &vocab()).remove(0).images.remove(0);
    let grid = m.encode_image(&img).unwrap();
    assert_eq!(grid.features.shape(), [4, 4, 128]);
    assert_eq!(grid, m.encode_image(&img.clone()).unwrap());
    assert!(matches!(m.encode_image(&Raster::blank(16, 16)), Err(Error::ImageSize { .. })));
}

#[test]
fn text_encoder_shapes() {
    let m = model(FusionKind::ConcatEncoder, 1);
    assert_eq!(m.encode_text(&seq(&[])).unwrap().shape(), [0, 128]);
    for l in [1usize, 7, 32] {
        let ids: Vec<u32> = (0..l as u32).map(|i| 12 + i % 40).collect();
        assert_eq!(m.encode_text(&seq(&ids)).unwrap().shape(), [l, 128]);
    }
    let a = m.encode_text(&seq(&[12, 13, 14, 15])).unwrap();
    let b = m.encode_text(&seq(&[13, 12, 14, 15])).unwrap();
    assert_ne!(a, b);

    let long: Vec<u32> = vec![12; 33];
    let ex = EncodedExample {
        images: vec![Raster::blank(32, 32)],
        input_ids: long,
        target_ids: vec![EOS],
        tag: TaskTag::Family(FamilyKind::Count),
    };
    assert!(matches!(m.forward_loss(&[ex]), Err(Error::SequenceTooLong { len: 33, max: 32 })));
}

#[test]
fn fused_lengths_and_segments() {
    let m = model(FusionKind::ConcatEncoder, 1);
    let img = Raster::blank(32, 32);
    let grid = m.encode_image(&img).unwrap();
    let text = m.encode_text(&seq(&[12, 13, 14, 15, 16, 17])).unwrap();
    let one = m.fuse(&[&grid], &text).unwrap();
    assert_eq!(one.len(), 22);
    let two = m.fuse(&[&grid, &grid], &text).unwrap();
    assert_eq!(two.len(), 38);
    assert_eq!(two.features.shape(), [38, 128]);
    let labels: Vec<Segment> = [Segment::Image1; 16]
        .into_iter()
        .chain([Segment::Image2; 16])
        .chain([Segment::Text; 6])
        .collect();
    assert_eq!(two.segments, labels);
    assert_eq!(m.fuse(&[&grid, &grid, &grid], &text).unwrap_err(), Error::ImageCount(3));
    assert!(matches!(m.fuse_xattn(&[&grid], &text), Err(Error::WrongFusion { .. })));

    let x = model(FusionKind::EncoderDecoder, 1);
    let grid = x.encode_image(&img).unwrap();
    let text = x.encode_text(&seq(&[12, 13, 14, 15, 16, 17])).unwrap();
    assert_eq!(x.fuse_xattn(&[&grid], &text).unwrap().len(), 6);
    assert!(matches!(x.fuse(&[&grid], &text), Err(Error::WrongFusion { .. })));
}

#[test]
fn zero_fusion_layers_is_plain_concatenation() {
    let config = ModelConfig { fusion_layers: 0, ..ModelConfig::default() };
    let m = AnswerMe::new(config, 0, 2).unwrap();
    let v = vocab();
    let ex = examples(FamilyKind::VqaAttr, 1, &v).remove(0);
    let grid = m.encode_image(&ex.images[0]).unwrap();
    let text = m.encode_text(&TokenSeq::new(ex.input_ids.clone(), &v).unwrap()).unwrap();
    let fused = m.fuse(&[&grid], &text).unwrap();
    let mut expected = grid.features.data().to_vec();
    expected.extend_from_slice(text.data());
    assert_eq!(fused.features.data(), expected.as_slice());
}

#[test]
fn cross_attention_fusion_costs_more_parameters() {
    for d in [32usize, 128] {
        let base = ModelConfig { d_model: d, ff_dim: 2 * d, ..ModelConfig::default() };
        let concat = AnswerMe::new(base.clone(), 0, 0).unwrap().param_count();
        let xattn = AnswerMe::new(ModelConfig { fusion_kind: FusionKind::EncoderDecoder, ..base }, 0, 0)
            .unwrap()
            .param_count();
        assert!(xattn > concat, "{xattn} vs {concat}");
    }
}

#[test]
fn image_encoder_receives_gradient() {
    let v = vocab();
    let batch = examples(FamilyKind::Count, 4, &v);
    for kind in [FusionKind::ConcatEncoder, FusionKind::EncoderDecoder] {
        let m = model(kind, 3);
        let (mut g, loss) = m.loss_graph(&batch).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut norm = 0.0;
        for (id, name, _) in m.params().iter() {
            if name.starts_with("image.") {
                norm += grads.param(id).unwrap().data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        assert!(norm.sqrt() > 1e-8, "{}: {norm}", kind.name());
    }
}

#[test]
fn decoder_step_contracts() {
    let m = model(FusionKind::ConcatEncoder, 4);
    let grid = m.encode_image(&Raster::blank(32, 32)).unwrap();
    let fused = m.fuse(&[&grid], &m.encode_text(&seq(&[12, 13])).unwrap()).unwrap();
    for prefix in [&[][..], &[20], &[20, 21, 22]] {
        let logits = m.decode_step(&fused, &seq(prefix)).unwrap();
        assert_eq!(logits.shape(), [512]);
        assert_eq!(logits, m.decode_step(&fused, &seq(prefix)).unwrap());
    }
    let full: Vec<u32> = vec![20; 24];
    assert!(matches!(m.decode_step(&fused, &seq(&full)), Err(Error::SequenceTooLong { .. })));
    let out = m.generate_greedy(&fused, 3).unwrap();
    assert!(out.len() <= 3);
}

#[test]
fn teacher_forcing_is_causal() {
    let v = vocab();
    let m = model(FusionKind::ConcatEncoder, 5);
    let mut ex = examples(FamilyKind::DetectText, 1, &v).remove(0);
    ex.target_ids = vec![20, 21, 22, 23, 24, EOS];
    let base = m.teacher_forced_logits(&ex).unwrap();
    for changed in 0..5 {
        let mut other = ex.clone();
        other.target_ids[changed] = 30;
        let logits = m.teacher_forced_logits(&other).unwrap();
        let vsize = base.cols();
        // logits at position t depend on targets before t only
        for t in 0..=changed {
            assert_eq!(base.row(t), logits.row(t), "position {t} after changing {changed}");
        }
        assert_ne!(&base.data()[(changed + 1) * vsize..], &logits.data()[(changed + 1) * vsize..]);
    }
}

#[test]
fn eos_favoring_model_answers_empty() {
    let mut m = model(FusionKind::ConcatEncoder, 6);
    let bias = m.params().id("decoder.out.b").unwrap();
    m.params_mut().get_mut(bias).data_mut()[EOS as usize] = 1e3;
    let v = vocab();
    let batch = examples(FamilyKind::Count, 3, &v);
    assert_eq!(predict(&m, &v, &batch, 2).unwrap(), ["", "", ""]);
}

#[test]
fn untrained_loss_is_near_uniform() {
    sanity::untrained_loss();
}

#[test]
fn overfits_one_batch_and_memorizes_it() {
    sanity::overfit_one_batch();
}

#[test]
fn loss_curves_are_deterministic_per_seed() {
    sanity::deterministic_curves();
}

#[test]
fn loss_is_a_mean_and_ignores_tags() {
    let v = vocab();
    let m = model(FusionKind::ConcatEncoder, 7);
    let ex = examples(FamilyKind::Entail, 1, &v).remove(0);
    let single = m.forward_loss(std::slice::from_ref(&ex)).unwrap();
    let double = m.forward_loss(&[ex.clone(), ex.clone()]).unwrap();
    assert!((single - double).abs() < 1e-12);

    let mut retagged = ex.clone();
    retagged.tag = TaskTag::Pretrain(PretrainTask::Mlm);
    assert_eq!(m.forward_loss(&[retagged]).unwrap().to_bits(), single.to_bits());
    assert_eq!(m.forward_loss(&[]).unwrap_err(), Error::EmptyBatch);
}

#[test]
fn batched_generation_matches_single_examples() {
    let v = vocab();
    let m = model(FusionKind::ConcatEncoder, 11);
    let mut batch = examples(FamilyKind::NlvrPair, 2, &v);
    batch.extend(examples(FamilyKind::Count, 3, &v));
    let prompts: Vec<Prompt<'_>> = batch
        .iter()
        .map(|e| Prompt { images: &e.images, input_ids: &e.input_ids })
        .collect();
    let together = m.generate(&prompts, 4).unwrap();
    for (p, expected) in prompts.iter().zip(&together) {
        assert_eq!(&m.generate(std::slice::from_ref(p), 4).unwrap()[0], expected);
        assert!(expected.len() <= 4);
    }
}
