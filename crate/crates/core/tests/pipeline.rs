use omnicodec::checkpoint::{load_codec, save_codec};
use omnicodec::codec::Codec;
use omnicodec::config::parse_config;
use omnicodec::token_io::{read_tokens, write_tokens, TokenMatrix};
use omnicodec::train::SyntheticSpec;
use omnicodec::{CodecConfig, PcmBuffer};
use proptest::prelude::*;

fn small(f: impl FnOnce(&mut CodecConfig)) -> Codec {
    let mut c = CodecConfig {
        hidden_dim: 16,
        transformer_layers: 1,
        transformer_heads: 2,
        transformer_ff_dim: 32,
        semantic_codebook_size: 16,
        semantic_dim: 16,
        acoustic_stages: 4,
        acoustic_codebook_size: 16,
        acoustic_code_dim: 8,
        disc_channels: 2,
        ..CodecConfig::default()
    };
    f(&mut c);
    let mut codec = Codec::new(c.validate().unwrap()).unwrap();
    let clip = SyntheticSpec::new(9, 24_000, 1.0).generate();
    codec.init_codebooks(&[&clip.samples]).unwrap();
    codec
}

fn chunked_encode(codec: &Codec, samples: &[f32], sizes: &[usize]) -> TokenMatrix {
    let mut enc = codec.token_encoder().unwrap();
    let mut out = TokenMatrix::empty(codec.cfg.total_streams(), codec.cfg.semantic_branch);
    let mut at = 0;
    for &n in sizes.iter().cycle() {
        if at >= samples.len() {
            break;
        }
        let end = (at + n).min(samples.len());
        out.extend(&enc.push(&samples[at..end]).unwrap()).unwrap();
        at = end;
    }
    out.extend(&enc.finish().unwrap()).unwrap();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn any_chunking_matches_batch(seed in 0u64..1000, len in 0usize..20_000, sizes in prop::collection::vec(1usize..4000, 1..6)) {
        let codec = small(|_| ());
        let pcm = PcmBuffer::new(SyntheticSpec::new(seed, 24_000, 1.0).generate().samples[..len].to_vec(), 24_000);
        let batch = codec.encode(&pcm).unwrap();
        prop_assert_eq!(chunked_encode(&codec, &pcm.samples, &sizes), batch);
    }
}

#[test]
fn decode_length_follows_padding() {
    for len in [0, 1, 1919, 1920, 1921, 24_000] {
        let codec = small(|_| ());
        let pcm = PcmBuffer::new(vec![0.05; len], 24_000);
        let tokens = codec.encode(&pcm).unwrap();
        assert_eq!(tokens.frames, len.div_ceil(1920));
        let out = codec.decode(&tokens).unwrap();
        assert_eq!(out.len(), tokens.frames * 1920);
        assert!(out.samples.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn half_rate_layout() {
    let codec = small(|c| c.seanet_ratios = vec![12, 8, 5, 4]);
    assert_eq!(codec.cfg.hop, 3840);
    let pcm = SyntheticSpec::new(2, 24_000, 1.0).generate();
    let tokens = codec.encode(&pcm).unwrap();
    assert_eq!(tokens.frames, 7);
    let bytes = write_tokens(&tokens, codec.stream_format()).unwrap();
    let (back, header) = read_tokens(&bytes).unwrap();
    assert_eq!(back, tokens);
    assert_eq!(header.frame_rate_hz(), 6.25);
    assert_eq!(codec.decode(&tokens).unwrap().len(), 7 * 3840);
}

#[test]
fn checkpoint_preserves_the_codec() {
    let dir = tempfile::tempdir().unwrap();
    for semantic in [true, false] {
        let codec = small(|c| c.semantic_branch = semantic);
        let path = dir.path().join(format!("{semantic}.omck"));
        save_codec(&path, &codec).unwrap();
        let loaded = load_codec(&path).unwrap();
        assert_eq!(loaded.cfg, codec.cfg);
        assert_eq!(loaded.num_params(), codec.num_params());
        let pcm = SyntheticSpec::new(5, 24_000, 0.7).generate();
        let a = codec.encode(&pcm).unwrap();
        assert_eq!(loaded.encode(&pcm).unwrap(), a);
        assert_eq!(loaded.decode(&a).unwrap().samples, codec.decode(&a).unwrap().samples);
    }
}

#[test]
fn config_text_round_trip() {
    for cfg in [CodecConfig::default(), CodecConfig::desk()] {
        let text = cfg.to_config_string();
        let (parsed, warnings) = parse_config(&text).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.config_hash(), cfg.config_hash());
    }
    let shipped = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf")).unwrap();
    let (parsed, _) = parse_config(&shipped).unwrap();
    assert_eq!(parsed, CodecConfig::desk());
}
