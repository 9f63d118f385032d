//! Tokenizer, noise channel, renderer and JSONL loaders.

use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tit_core::data::tit::split_sizes;
use tit_core::data::{
    corrupt_ocr, examples, gen_parallel_corpus, gen_tit_images, load_tit_jsonl, render_text_image, write_tit_jsonl,
    GrayImage, Language, LanguageSpec, NoiseSpec, RenderSpec, TitGenSpec, Vocab, UNK,
};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn random_word(rng: &mut ChaCha8Rng, lens: std::ops::Range<usize>) -> String {
    let len = rng.random_range(lens);
    (0..len)
        .map(|_| {
            let i = rng.random_range(0..52u8);
            if i < 26 { (b'a' + i) as char } else { (b'A' + i - 26) as char }
        })
        .collect()
}

#[test]
fn round_trip_over_random_strings() {
    let vocab = Vocab::latin();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let words: Vec<String> = (0..rng.random_range(0..6)).map(|_| random_word(&mut rng, 1..9)).collect();
        let s = words.join(" ");
        assert_eq!(vocab.detokenize(&vocab.tokenize(&s)), s);
    }
    assert!(vocab.tokenize("").is_empty());
    assert_eq!(vocab.tokenize("a#"), vec![vocab.id('a'), UNK]);
}

#[test]
fn exact_match_rate_follows_binomial_model() {
    let spec = NoiseSpec::with_rate(0.15, 3);
    let text = "window";
    let n = 10_000;
    let exact = (0..n)
        .filter(|&i| corrupt_ocr(text, &spec, i as u64).unwrap() == text)
        .count() as f64;
    let p = 0.85f64.powi(text.len() as i32);
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((exact - n as f64 * p).abs() < 3.0 * sigma, "{exact} vs {}", n as f64 * p);
}

#[test]
fn expected_length_is_preserved() {
    let spec = NoiseSpec::with_rate(0.3, 4);
    let text = "abcdefghijklmnopqrst";
    let n = 10_000;
    let total: usize = (0..n).map(|i| corrupt_ocr(text, &spec, i).unwrap().chars().count()).sum();
    let mean = total as f64 / n as f64;
    let per_char_var = spec.insertion + spec.deletion - (spec.insertion - spec.deletion).powi(2);
    let sigma = (text.len() as f64 * per_char_var / n as f64).sqrt();
    let expect = text.len() as f64 * (1.0 + spec.insertion - spec.deletion);
    assert!((mean - expect).abs() < 3.0 * sigma, "{mean} vs {expect} ± {sigma}");
}

#[test]
fn distinct_texts_render_distinctly() {
    let spec = RenderSpec {
        noise: 0.0,
        ..RenderSpec::strip(12)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..10_000u64 {
        let a = random_word(&mut rng, 1..12);
        let mut b = random_word(&mut rng, 1..12);
        if a == b {
            b.push('x');
        }
        let ia = render_text_image(&a, &spec, i).unwrap();
        let ib = render_text_image(&b, &spec, i).unwrap();
        assert_ne!(ia.pixels(), ib.pixels(), "{a} / {b}");
        assert_eq!(ia, render_text_image(&a, &spec, i).unwrap());
    }
}

fn small_language() -> Language {
    Language::new(LanguageSpec {
        topics: 3,
        words_per_topic: 5,
        min_word_len: 2,
        max_word_len: 5,
        min_words: 1,
        max_words: 4,
        ..LanguageSpec::default()
    })
    .unwrap()
}

#[test]
fn generators_are_pure_functions_of_seed() {
    let lang = small_language();
    assert_eq!(gen_parallel_corpus(&lang, 50, 9).unwrap(), gen_parallel_corpus(&lang, 50, 9).unwrap());
    for (s, t) in gen_parallel_corpus(&lang, 50, 9).unwrap() {
        assert_eq!(lang.invert(&t).unwrap(), s);
    }
    let spec = TitGenSpec {
        render: RenderSpec::strip(30),
        noise: NoiseSpec::with_rate(0.2, 1),
        min_lines: 1,
        max_lines: 3,
        translate: true,
        recognize: true,
    };
    let a = gen_tit_images(&lang, &spec, 12, 4).unwrap();
    assert_eq!(a, gen_tit_images(&lang, &spec, 12, 4).unwrap());
}

#[test]
fn jsonl_round_trip_inline_and_pgm() {
    let lang = small_language();
    let spec = TitGenSpec {
        render: RenderSpec::strip(30),
        noise: NoiseSpec::with_rate(0.2, 1),
        min_lines: 2,
        max_lines: 3,
        translate: true,
        recognize: true,
    };
    let images = gen_tit_images(&lang, &spec, 6, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let inline = dir.path().join("inline.jsonl");
    write_tit_jsonl(&inline, &images, None).unwrap();
    assert_eq!(load_tit_jsonl(&inline).unwrap(), images);
    let files = dir.path().join("files.jsonl");
    write_tit_jsonl(&files, &images, Some(Path::new("pgm"))).unwrap();
    assert_eq!(load_tit_jsonl(&files).unwrap(), images);
    let n_lines: usize = images.iter().map(|i| i.lines.len()).sum();
    assert_eq!(examples(&images, 30, 8).unwrap().len(), n_lines);
}

#[test]
fn scene_fixture_loads_with_bbox_crops() {
    let images = load_tit_jsonl(&fixture("scene.jsonl")).unwrap();
    assert_eq!(images.len(), 1);
    let full = GrayImage::read_pgm(&fixture("scene.pgm")).unwrap();
    let ex = examples(&images, 4, 2).unwrap();
    assert_eq!(ex.len(), 3);
    assert_eq!(ex[0].recognized.as_deref(), Some("opem daily"));
    assert_eq!(ex[1].recognized, None);
    assert_eq!(ex[2].translation, "stationnement interdit");
    for (e, line) in ex.iter().zip(&images[0].lines) {
        let [x, y, w, h] = line.bbox;
        let expect = full.crop(x, y, w, h).unwrap().resize_nearest(4, 2);
        assert_eq!(e.image, expect);
        assert_eq!((e.image.width(), e.image.height()), (4, 2));
    }
    // Pixel (x, y) of the fixture holds (10x + 3y) mod 256.
    assert_eq!(ex[0].image.get(0, 0), 2 * 10 + 3);
}

#[test]
fn malformed_records_name_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    std::fs::write(&p, "{\"id\": \"a\", \"image\": {\"b64\": \"\", \"w\": 0, \"h\": 0}, \"lines\": []}\nnot json\n").unwrap();
    let err = load_tit_jsonl(&p).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
    std::fs::write(&p, "{\"id\": \"a\", \"image\": {\"pgm_path\": \"x.pgm\"}}\n").unwrap();
    let err = load_tit_jsonl(&p).unwrap_err().to_string();
    assert!(err.contains("lines"), "{err}");
}

#[test]
fn split_rule_sizes() {
    assert_eq!(split_sizes(5000), (1000, 1000));
    assert_eq!(split_sizes(3000), (1000, 1000));
    assert_eq!(split_sizes(2999), (299, 299));
}

proptest! {
    #[test]
    fn tokenizer_round_trips(s in "[a-zA-Z ]{0,40}") {
        let vocab = Vocab::latin();
        prop_assert_eq!(vocab.detokenize(&vocab.tokenize(&s)), s);
    }

    #[test]
    fn zero_rate_channel_is_identity(s in "[a-z ]{0,30}", seed in 0u64..1000, ex in 0u64..1000) {
        prop_assert_eq!(corrupt_ocr(&s, &NoiseSpec::clean(seed), ex).unwrap(), s);
    }
}
