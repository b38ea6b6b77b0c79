use duotts::toy_world::records::{read_jsonl, write_jsonl};
use duotts::toy_world::{
    build_alignment_pairs, build_quadruples, codec_decode, codec_encode, gen_corpus, oracle_transcribe,
    toy_lm_continue, Codebook, Grammar, PairStrategy, Renderer, SpeechTokens, ToyUtterance, WorldConfig,
    TTS_VOICE_SPEAKER,
};
use proptest::prelude::*;

fn world() -> (WorldConfig, Renderer, &'static Codebook) {
    let cfg = WorldConfig::default();
    let r = Renderer::new(&cfg).unwrap();
    (cfg, r, Codebook::shipped().unwrap())
}

#[test]
fn shipped_codebook_matches_regeneration() {
    let cfg = WorldConfig::default();
    let fresh = Codebook::fit(&cfg).unwrap();
    assert_eq!(fresh.to_bytes(), Codebook::shipped().unwrap().to_bytes());
    assert_eq!(fresh.size() + 1, cfg.speech_vocab);
}

#[test]
fn margin_holds_for_shipped_codebook() {
    let (cfg, r, book) = world();
    let m = book.margin(&r, &gen_corpus(42, &cfg, 1000).unwrap()).unwrap();
    assert!(m.radius_margin_holds(), "{m:?}");
    assert!(m.holds(), "{m:?}");
}

#[test]
fn encode_length_and_decode_error_bound() {
    let (cfg, r, book) = world();
    let corpus = gen_corpus(9, &cfg, 300).unwrap();
    let m = book.margin(&r, &corpus).unwrap();
    for u in &corpus {
        let f = r.render(u).unwrap();
        let t = codec_encode(book, &f).unwrap();
        assert_eq!(t.len(), f.len() + 1);
        assert_eq!(*t.ids().last().unwrap(), book.eos());
        let back = codec_decode(book, &t).unwrap();
        for i in 0..f.len() {
            let e: f32 = f.frame(i).iter().zip(back.frame(i)).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
            assert!(e <= m.max_quant_radius);
        }
    }
}

#[test]
fn oracle_is_exact_after_codec_round_trip() {
    let (cfg, r, book) = world();
    for u in gen_corpus(13, &cfg, 500).unwrap() {
        let back = codec_decode(book, &codec_encode(book, &r.render(&u).unwrap()).unwrap()).unwrap();
        let t = oracle_transcribe(&r, &back);
        assert_eq!(t.text(), u.text);
        assert_eq!(t.failures(), 0);
        assert_eq!((t.dialect, t.emotion), (Some(u.dialect), Some(u.emotion)));
    }
}

#[test]
fn every_centroid_decodes_inside_a_region() {
    let (_, r, book) = world();
    let m = book.margin(&r, &[]).unwrap();
    assert!(m.centroid_margin_holds(), "{m:?}");
}

#[test]
fn unknown_ids_fail_to_decode() {
    let (_, _, book) = world();
    let foreign = SpeechTokens::new(vec![3, 999], 999).unwrap();
    assert!(codec_decode(book, &foreign).is_err());
}

proptest! {
    #[test]
    fn encode_decode_is_identity(body in prop::collection::vec(0usize..256, 0..64)) {
        let (_, _, book) = world();
        let t = SpeechTokens::from_body(body, book.eos()).unwrap();
        let again = codec_encode(book, &codec_decode(book, &t).unwrap()).unwrap();
        prop_assert_eq!(again, t);
    }
}

#[test]
fn alignment_pairs_follow_the_toy_lm() {
    let (cfg, r, _) = world();
    let corpus = gen_corpus(3, &cfg, 40).unwrap();
    let g = Grammar::new(cfg.alphabet, cfg.dialects);
    let v = cfg.vocab();
    for strategy in [PairStrategy::TranscriptContinuation, PairStrategy::TtsRendered] {
        let pairs = build_alignment_pairs(&corpus, strategy, &r).unwrap();
        assert_eq!(pairs.len(), corpus.len());
        for (p, u) in pairs.iter().zip(&corpus) {
            let mut prefix = p.descriptor_prefix.clone();
            prefix.extend_from_slice(&u.text);
            assert_eq!(p.continuation_text, toy_lm_continue(&g, &v, &prefix, cfg.continuation_len));
            assert_eq!(p.descriptor_prefix, v.descriptor_prefix(u.dialect, u.emotion));
            let voice = match strategy {
                PairStrategy::TranscriptContinuation => u.speaker,
                PairStrategy::TtsRendered => TTS_VOICE_SPEAKER,
            };
            let expect = r.render(&ToyUtterance { speaker: voice, ..u.clone() }).unwrap();
            assert_eq!(p.prompt_frames, expect);
        }
    }
    assert!(build_alignment_pairs(&[], PairStrategy::TtsRendered, &r).is_err());
}

#[test]
fn descriptor_tokens_differ_by_dialect() {
    let (cfg, r, _) = world();
    let corpus = gen_corpus(4, &cfg, 200).unwrap();
    let pairs = build_alignment_pairs(&corpus, PairStrategy::TranscriptContinuation, &r).unwrap();
    let a = pairs.iter().find(|p| p.dialect == 0).unwrap();
    let b = pairs.iter().find(|p| p.dialect == 1).unwrap();
    assert_ne!(a.descriptor_prefix[0], b.descriptor_prefix[0]);
}

fn utt(id: u64, speaker: usize) -> ToyUtterance {
    ToyUtterance {
        id,
        conversation: id / 2,
        text: vec![1, 2, 3],
        speaker,
        dialect: 1,
        emotion: 2,
    }
}

#[test]
fn quadruples_pair_consecutive_same_speaker_utterances() {
    let (_, r, book) = world();
    let corpus: Vec<ToyUtterance> = (0..4).map(|i| utt(i, 5)).chain([utt(4, 6)]).collect();
    let (quads, report) = build_quadruples(&corpus, &r, book).unwrap();
    assert_eq!(quads.len(), 2);
    assert_eq!(report.skipped_unpaired, 1);
    assert_eq!(report.speakers_skipped, vec![6]);
    for q in &quads {
        assert_eq!(q.speaker, 5);
        assert_eq!(*q.speech_response.ids().last().unwrap(), book.eos());
    }
}

#[test]
fn corpus_quadruples_share_speaker_characteristics() {
    let (cfg, r, book) = world();
    let corpus = gen_corpus(0, &cfg, 200).unwrap();
    let (quads, report) = build_quadruples(&corpus, &r, book).unwrap();
    assert_eq!(report.built, quads.len());
    assert!(quads.len() >= 90);
    for q in &quads {
        let (a, b) = (&corpus[q.query_id as usize], &corpus[q.response_id as usize]);
        assert_eq!((a.speaker, a.dialect, a.emotion), (b.speaker, b.dialect, b.emotion));
        let t = oracle_transcribe(&r, &q.speech_query);
        assert_eq!(t.speaker, Some(q.speaker));
    }
}

#[test]
fn records_round_trip_through_jsonl() {
    let (cfg, r, book) = world();
    let corpus = gen_corpus(2, &cfg, 20).unwrap();
    let (quads, _) = build_quadruples(&corpus, &r, book).unwrap();
    let dir = std::env::temp_dir().join(format!("duotts-records-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("quads.jsonl");
    write_jsonl(&path, &quads).unwrap();
    let back: Vec<duotts::toy_world::Quadruple> = read_jsonl(&path).unwrap();
    assert_eq!(back, quads);
    std::fs::remove_dir_all(&dir).unwrap();
}
