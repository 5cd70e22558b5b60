mod oracles;

use abpe::bpe::{
    bpe_decode, bpe_encode, codepoints_to_tokens, format_bpe_file, read_bpe_file, tokens_to_codepoints,
    BpeTrainer, BpeVocab,
};
use abpe::corpus::{
    decode_feature_matrix, encode_feature_matrix, format_token_file, parse_id_lines, read_token_file,
    FeatureMatrix, TokenSequence,
};
use abpe::lm::{LmConfig, LmParams};
use abpe::quantizer::Codebook;
use proptest::prelude::*;

fn corpus_strategy(max_k: u32) -> impl Strategy<Value = (u32, Vec<Vec<u32>>)> {
    (1..=max_k).prop_flat_map(|k| {
        (Just(k), prop::collection::vec(prop::collection::vec(0..k, 1..40), 1..8))
    })
}

fn to_seqs(k: u32, raw: &[Vec<u32>]) -> Vec<TokenSequence> {
    raw.iter()
        .enumerate()
        .map(|(i, s)| TokenSequence::new(format!("utt-{i}"), s.clone(), k).unwrap())
        .collect()
}

proptest! {
    #[test]
    fn bpe_is_lossless_and_matches_oracle((k, raw) in corpus_strategy(6), extra in 0u32..30, min_freq in 1u64..3) {
        let seqs = to_seqs(k, &raw);
        let vocab = BpeTrainer::new(k + extra).min_pair_freq(min_freq).train(&seqs).unwrap();
        let (want, _) = oracles::bpe_train(&raw, k, k + extra, min_freq);
        prop_assert_eq!(vocab.merges(), want.as_slice());
        for (seq, r) in seqs.iter().zip(&raw) {
            let enc = bpe_encode(seq, &vocab).unwrap();
            let expected = oracles::bpe_encode(r, k, &want);
            prop_assert_eq!(enc.ids(), expected.as_slice());
            prop_assert_eq!(&bpe_decode(&enc, &vocab).unwrap(), seq);
        }
    }

    #[test]
    fn truncated_vocab_encodings_never_grow((k, raw) in corpus_strategy(5)) {
        let seqs = to_seqs(k, &raw);
        let vocab = BpeTrainer::new(k + 20).min_pair_freq(1).train(&seqs).unwrap();
        let total = |v: &BpeVocab| seqs.iter().map(|s| bpe_encode(s, v).unwrap().len()).sum::<usize>();
        let mut prev = usize::MAX;
        for n in 0..=vocab.merges().len() {
            let t = total(&vocab.truncated(n));
            prop_assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn token_and_bpe_files_roundtrip((k, raw) in corpus_strategy(50)) {
        let dir = tempfile::tempdir().unwrap();
        let seqs = to_seqs(k, &raw);
        let path = dir.path().join("t.txt");
        std::fs::write(&path, format_token_file(&seqs).unwrap()).unwrap();
        prop_assert_eq!(&read_token_file(&path).unwrap(), &seqs);

        let vocab = BpeTrainer::new(k + 10).min_pair_freq(1).train(&seqs).unwrap();
        let enc: Vec<_> = seqs.iter().map(|s| bpe_encode(s, &vocab).unwrap()).collect();
        let text = format_bpe_file(&enc).unwrap();
        let bpath = dir.path().join("b.txt");
        std::fs::write(&bpath, &text).unwrap();
        let back = read_bpe_file(&bpath).unwrap();
        prop_assert_eq!(format_bpe_file(&back).unwrap(), text);

        let parsed = parse_id_lines(&format_token_file(&seqs).unwrap(), &['K']).unwrap();
        prop_assert_eq!(parsed.size, k);
        prop_assert_eq!(BpeVocab::from_text(&vocab.to_text()).unwrap(), vocab);
    }

    #[test]
    fn codepoint_mapping_inverts((k, raw) in corpus_strategy(3000), offset in prop::sample::select(vec![0x4E00u32, 0x100, 0xF0000])) {
        for (i, s) in to_seqs(k, &raw).iter().enumerate() {
            let text = tokens_to_codepoints(s, offset).unwrap();
            prop_assert_eq!(text.chars().count(), s.len());
            let back = codepoints_to_tokens(format!("utt-{i}"), &text, offset, k).unwrap();
            prop_assert_eq!(&back, s);
        }
    }

    #[test]
    fn feature_matrices_roundtrip(rows in 1usize..20, cols in 1usize..10, shift in 1.0f32..40.0, seed in any::<u64>()) {
        let data: Vec<f32> = (0..rows * cols)
            .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 33) as u32 & 0x7F7F_FFFF))
            .collect();
        let m = FeatureMatrix::new("m", shift, rows, cols, data).unwrap();
        let bytes = encode_feature_matrix(&m).unwrap();
        prop_assert_eq!(&decode_feature_matrix(&bytes).unwrap(), &m);
        prop_assert!(decode_feature_matrix(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn codebooks_roundtrip(k in 1usize..6, d in 1usize..5, scale in -10.0f32..10.0) {
        let c: Vec<f32> = (0..k * d).map(|i| scale * i as f32).collect();
        let cb = Codebook::new(k, d, c, 1.5).unwrap();
        prop_assert_eq!(&Codebook::from_bytes(&cb.to_bytes()).unwrap(), &cb);
    }
}

#[test]
fn checkpoint_roundtrip_is_byte_stable() {
    let cfg = LmConfig {
        dim: 8,
        heads: 2,
        layers: 1,
        seed: 4,
        ..LmConfig::new(5, 9)
    };
    let p = LmParams::<f32>::init(&cfg).unwrap();
    let bytes = p.to_bytes();
    let back = LmParams::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.to_bytes(), bytes);
    assert!(LmParams::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
