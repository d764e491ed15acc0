//! Property suites for the pretraining-task generators.

use answerme_core::raster::Raster;
use answerme_core::tasks::{cmp_fraction, make_cmp, make_cmp_at, make_itm, make_mlm, CaptionPair, MlmTarget};
use answerme_core::text::{sentinel_token, tokenize};
use answerme_core::{seeded_rng, SeededRng};
use rand::Rng;

pub const DRAWS: usize = 10_000;
const WORDS: [&str; 12] = [
    "a", "red", "circle", "and", "small", "blue", "square", "near", "large", "star", "the", "green",
];

pub fn pair(caption: &str, id: u64) -> CaptionPair {
    CaptionPair::new(Raster::blank(4, 4), id, caption.into()).unwrap()
}

pub fn random_caption(rng: &mut SeededRng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// CMP prefixes over [`DRAWS`] captions: drawn fraction in range and
/// uniform, prefix length and split exact. Returns the observed range.
pub fn cmp_suite() -> String {
    let mut rng = seeded_rng(2);
    let mut fractions = Vec::with_capacity(DRAWS);
    for i in 0..DRAWS {
        let p = pair(&random_caption(&mut rng, 2, 30), i as u64);
        let mut replay = rng.clone();
        let f = cmp_fraction(&mut replay);
        let ex = make_cmp(&p, &mut rng);
        assert_eq!(ex, make_cmp_at(&p, f));
        assert!((0.10..=0.40).contains(&f), "fraction {f}");

        let words = tokenize(&p.caption);
        let n = words.len();
        let k = tokenize(&ex.input_text).len();
        assert_eq!(k, round_half_up(f * n as f64).max(1));
        assert_eq!(format!("{} {}", ex.input_text, ex.target_text), words.join(" "));
        assert!(!ex.target_text.is_empty());
        if n >= 20 {
            let realized = k as f64 / n as f64;
            let slack = 0.5 / n as f64;
            assert!(realized >= 0.10 - slack && realized <= 0.40 + slack);
        }
        fractions.push(f);
    }
    // Kolmogorov-Smirnov distance to uniform on [0.1, 0.4], 1% critical value
    fractions.sort_by(f64::total_cmp);
    let n = fractions.len() as f64;
    let ks = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let cdf = (f - 0.10) / 0.30;
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.63 / n.sqrt(), "KS distance {ks}");
    assert!(fractions[0] < 0.11 && fractions[DRAWS - 1] > 0.39);
    format!("fractions in [{:.4}, {:.4}], KS {ks:.4}", fractions[0], fractions[DRAWS - 1])
}

/// MLM over [`DRAWS`] captions: mask count and exact reconstruction.
pub fn mlm_suite() -> String {
    let mut rng = seeded_rng(4);
    for i in 0..DRAWS {
        let p = pair(&random_caption(&mut rng, 1, 28), i as u64);
        let words = tokenize(&p.caption);
        let ex = make_mlm(&p, MlmTarget::MissingWords, &mut rng);
        let k = round_half_up(0.25 * words.len() as f64).max(1);

        let input = tokenize(&ex.input_text);
        assert_eq!(input.len(), words.len());
        let sentinels: Vec<&String> = input.iter().filter(|w| w.starts_with("<sent_")).collect();
        assert_eq!(sentinels.len(), k);
        for (j, s) in sentinels.iter().enumerate() {
            assert_eq!(**s, sentinel_token(j));
        }

        let target = tokenize(&ex.target_text);
        assert_eq!(target.len(), 2 * k);
        let mut missing = target.chunks(2).enumerate().map(|(j, c)| {
            assert_eq!(c[0], sentinel_token(j));
            c[1].clone()
        });
        let rebuilt: Vec<String> = input
            .iter()
            .map(|w| if w.starts_with("<sent_") { missing.next().unwrap() } else { w.clone() })
            .collect();
        assert_eq!(rebuilt, words);
    }
    format!("{DRAWS} captions reconstructed")
}

/// ITM over [`DRAWS`] draws: label soundness and positive rate.
pub fn itm_suite() -> String {
    let mut rng = seeded_rng(5);
    let pool: Vec<String> = (0..200).map(|_| random_caption(&mut rng, 3, 9)).collect();
    let mut positives = 0;
    for i in 0..DRAWS {
        let caption = &pool[i % pool.len()];
        let ex = make_itm(&pair(caption, i as u64), &pool, &mut rng).unwrap();
        let matched = ex.input_text == *caption;
        assert_eq!(ex.target_text, if matched { "true" } else { "false" });
        assert!(pool.contains(&ex.input_text));
        positives += usize::from(matched);
    }
    let rate = positives as f64 / DRAWS as f64;
    assert!((0.48..=0.52).contains(&rate), "positive rate {rate}");
    format!("positive rate {rate:.4}")
}
