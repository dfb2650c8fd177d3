use binomark::attacks::{AttackConfig, AttackKind};
use binomark::eval::{run_sweep, SweepCell, SweepConfig};
use binomark::lm::{
    generate, read_jsonl, write_jsonl, write_jsonl_header, GenerationRecord, GenerationRequest,
    LmSpec, SamplerConfig, ShapedLm,
};
use binomark::{Detector, EncoderMode, Error, Message, SchemeConfig, WatermarkKey};
use proptest::prelude::*;

fn lm() -> ShapedLm {
    ShapedLm::new(
        LmSpec::default().build().unwrap(),
        &SamplerConfig::default(),
    )
}

fn key() -> WatermarkKey {
    WatermarkKey::new([42; 32], 3).unwrap()
}

fn record(
    lm: &ShapedLm,
    message: &Message,
    scheme: &SchemeConfig,
    encoder: &EncoderMode,
    n: usize,
    seed: u64,
) -> binomark::Result<GenerationRecord> {
    generate(&GenerationRequest {
        lm,
        key: &key(),
        message,
        scheme,
        encoder,
        sampler: &SamplerConfig::default(),
        n_tokens: n,
        seed,
        trace: false,
    })
    .map(|o| o.record)
}

fn detect(r: &GenerationRecord) -> binomark::DetectionReport {
    let detector = Detector::new(key(), r.decoder_config().unwrap()).unwrap();
    detector.detect(&r.completion).unwrap()
}

#[test]
fn every_scheme_round_trips_a_strong_watermark() {
    let lm = lm();
    let message = Message::from_bit_str("1100101011110000").unwrap();
    let cases = [
        (
            SchemeConfig::RedGreen { delta: 6.0 },
            EncoderMode::Stateless,
        ),
        (SchemeConfig::soft_ppl(0.5), EncoderMode::Stateless),
        (SchemeConfig::soft_ppl(0.5), EncoderMode::stateful()),
        (
            SchemeConfig::SoftPplUnconstrained { lambda: 0.2 },
            EncoderMode::Stateless,
        ),
        (
            SchemeConfig::RedGreen { delta: 6.0 },
            EncoderMode::Allocation { segments: 4 },
        ),
        (SchemeConfig::synthid(8), EncoderMode::Stateless),
    ];
    for (scheme, encoder) in cases {
        let r = record(&lm, &message, &scheme, &encoder, 300, 3).unwrap();
        let report = detect(&r);
        assert_eq!(
            report.decoded,
            message,
            "{} / {}",
            scheme.label(),
            encoder.label()
        );
        assert!(report.zero_bit_pvalue < 0.01);
    }
}

#[test]
fn unwatermarked_text_is_not_flagged() {
    let lm = lm();
    let message = Message::from_bit_str("10101010").unwrap();
    let flagged = (0..40)
        .filter(|&seed| {
            let r = record(
                &lm,
                &message,
                &SchemeConfig::Unwatermarked,
                &EncoderMode::Stateless,
                200,
                seed,
            )
            .unwrap();
            detect(&r).is_detected(0.01)
        })
        .count();
    assert!(flagged <= 3);
}

#[test]
fn illegal_combinations_are_rejected() {
    let lm = lm();
    let message = Message::from_bit_str("1010").unwrap();
    let err = record(
        &lm,
        &message,
        &SchemeConfig::synthid(4),
        &EncoderMode::stateful(),
        10,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::IllegalCombination(_)));
    let odd = Message::from_bit_str("101").unwrap();
    assert!(record(
        &lm,
        &odd,
        &SchemeConfig::RedGreen { delta: 1.0 },
        &EncoderMode::Allocation { segments: 2 },
        10,
        0
    )
    .is_err());
}

#[test]
fn records_survive_a_jsonl_round_trip() {
    let lm = lm();
    let message = Message::from_bit_str("0110").unwrap();
    let original = record(
        &lm,
        &message,
        &SchemeConfig::soft_ppl(0.3),
        &EncoderMode::stateful(),
        40,
        8,
    )
    .unwrap();
    let attacked = AttackConfig::new(AttackKind::Substitute, 0.25, 5)
        .unwrap()
        .apply_to_record(&original)
        .unwrap();
    let mut buf = Vec::new();
    write_jsonl_header(&mut buf, "test").unwrap();
    write_jsonl(&mut buf, &original).unwrap();
    write_jsonl(&mut buf, &attacked).unwrap();
    let parsed: Vec<(usize, Result<GenerationRecord, String>)> =
        read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(parsed.len(), 2);
    assert_eq!(parsed[0].0, 2);
    assert_eq!(parsed[0].1.as_ref().unwrap(), &original);
    assert_eq!(parsed[1].1.as_ref().unwrap(), &attacked);
    assert_eq!(attacked.attack.as_ref().unwrap().original_length, 40);
}

#[test]
fn sweeps_are_reproducible_and_share_generation() {
    let base = SweepCell::new(
        SchemeConfig::RedGreen { delta: 2.0 },
        EncoderMode::Stateless,
        8,
        60,
    );
    let cells = vec![
        base.clone(),
        base.clone()
            .with_attack(Some(AttackConfig::new(AttackKind::Delete, 0.0, 1).unwrap())),
    ];
    let mut cfg = SweepConfig::new(cells, 12, 77, key());
    cfg.mc_samples = 1000;
    let a = run_sweep(&cfg, |_| {}).unwrap();
    let b = run_sweep(&cfg, |_| {}).unwrap();
    assert_eq!(a[0].row, b[0].row);
    assert_eq!(a[0].outcomes, a[1].outcomes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoding_is_deterministic_and_in_range(seed in any::<u64>(), m in 1usize..40, n in 1usize..80) {
        let lm = lm();
        let message = Message::random(m, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)).unwrap();
        let r = record(&lm, &message, &SchemeConfig::RedGreen { delta: 1.5 }, &EncoderMode::Stateless, n, seed).unwrap();
        prop_assert_eq!(r.completion.len(), n);
        let a = detect(&r);
        let b = detect(&r);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.decoded.len(), m);
        prop_assert!(a.effective_length <= n && a.effective_length >= 1);
        prop_assert!(a.per_bit_pvalues.iter().all(|&p| p > 0.0 && p <= 1.0));
        prop_assert!(a.zero_bit_pvalue > 0.0 && a.zero_bit_pvalue <= 1.0);
    }
}
