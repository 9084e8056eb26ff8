use super::*;
use crate::fusion::GroundingMode;
use crate::grounding::DualEncoder;
use crate::index::VectorIndex;
use crate::rng::Rng;
use crate::tokenizer::Vocab;
use crate::train::pack_corpus;
use crate::world::{World, WorldConfig};
use std::sync::OnceLock;

fn bench_cfg_model() -> (BackboneConfig, EncoderConfig) {
    let cfg = BackboneConfig {
        layers: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 16,
        vocab_size: 10,
        dropout_p: 0.0,
        tied_embeddings: true,
    };
    let enc = EncoderConfig {
        vocab_size: 10,
        d_model: 4,
        n_heads: 2,
        d_ff: 8,
        max_len: 8,
        d_clip: 4,
        d_img: 6,
        img_hidden: 4,
    };
    (cfg, enc)
}

#[test]
fn hand_count_matches_analytic_formula() {
    // L=3, d=8, heads=2, d_ff=16, N=4, V=10; chunk 2; encoder d=4, d_ff=8,
    // d_clip=4; retrieval k=2 over 50 entries. Every product written out.
    let (cfg, enc) = bench_cfg_model();
    let n = 4usize;

    // backbone: 2 blocks
    // per block: qkv 3*2*4*8*8 = 1536, scores 2*4*4*8 = 256, apply 256,
    //            out 2*4*8*8 = 512, ffn 2*4*8*16 + 2*4*16*8 = 2048
    let per_block = 1536 + 256 + 256 + 512 + 2048;
    let backbone = 2 * per_block + 2 * 4 * 8 * 10; // + head 640
    assert_eq!(per_block, 4608);
    assert_eq!(backbone, 9856);

    // encoder over a 2-token prefix (+EOS = 3 tokens): 2 blocks at d=4, ff=8
    // per block: qkv 3*2*3*4*4 = 288, scores 2*9*4 = 72, apply 72,
    //            out 2*3*4*4 = 96, ffn 2*3*4*8 + 2*3*8*4 = 384
    let enc_block = 288 + 72 + 72 + 96 + 384;
    let encode = 2 * enc_block + 2 * 4 * 4; // + pooled projection 32
    assert_eq!(encode, 1856);

    // fusion, 2 chunks of 2 rows, G=1 each (null + direct text):
    // per chunk: q 2*2*8*8 = 256, proj 2*1*4*8 = 64, kv 2*(2*1*8*8) = 256,
    //            scores 2*2*1*8 = 32, apply 32, out 2*2*8*8 = 256
    let fusion_chunk = 256 + 64 + 256 + 32 + 32 + 256;
    let fusion_direct = 2 * fusion_chunk;
    assert_eq!(fusion_direct, 1792);

    let direct = count_flops(&cfg, &enc, GroundingMode::direct_text(2), n, 0);
    assert_eq!(direct.backbone, backbone as u64);
    assert_eq!(direct.grounding_encode, encode as u64);
    assert_eq!(direct.fusion, fusion_direct as u64);
    assert_eq!(direct.retrieval, 0);
    assert_eq!(
        direct.total(),
        (backbone + encode + fusion_direct) as u64
    );

    // retrieval with k=2 over 50 entries: one query from chunk 1,
    // distances 2*50*4 = 400; chunk 1 now has G=2:
    // proj 2*2*4*8 = 128, kv 2*(2*2*8*8) = 512, scores 2*2*2*8 = 64,
    // apply 64, q 256, out 256 -> 1280; chunk 0 unchanged (896)
    let retr = count_flops(&cfg, &enc, GroundingMode::image_retrieval(2, 2), n, 50);
    assert_eq!(retr.retrieval, 400);
    assert_eq!(retr.grounding_encode, encode as u64);
    assert_eq!(retr.fusion, (fusion_chunk + 1280) as u64);
}

#[test]
fn fusion_flops_grow_with_retrieved_count() {
    let (cfg, enc) = bench_cfg_model();
    let g1 = count_flops(&cfg, &enc, GroundingMode::image_retrieval(1, 2), 8, 1000);
    let g8 = count_flops(&cfg, &enc, GroundingMode::image_retrieval(8, 2), 8, 1000);
    assert!(g1.fusion < g8.fusion, "{} vs {}", g1.fusion, g8.fusion);
}

#[test]
fn mode_none_has_zero_fusion_flops() {
    let (cfg, enc) = bench_cfg_model();
    let none = count_flops(&cfg, &enc, GroundingMode::none(), 8, 0);
    assert_eq!(none.fusion, 0);
    assert_eq!(none.grounding_encode, 0);
    assert_eq!(none.retrieval, 0);
    assert!(none.backbone > 0);
}

#[test]
fn direct_text_needs_fewer_flops_than_any_retrieval() {
    let (cfg, enc) = bench_cfg_model();
    let direct = count_flops(&cfg, &enc, GroundingMode::direct_text(2), 16, 0);
    for k in [2usize, 4, 8, 32] {
        let retr = count_flops(&cfg, &enc, GroundingMode::image_retrieval(k, 2), 16, 100_000);
        assert!(
            direct.total() < retr.total(),
            "k={k}: {} vs {}",
            direct.total(),
            retr.total()
        );
    }
}

struct Fixture {
    vocab: Vocab,
    windows: Vec<Vec<u32>>,
    encoder: DualEncoder,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = World::generate(WorldConfig {
            seed: 77,
            n_concepts: 12,
            captions_per_concept: 4,
            docs_per_concept: 6,
            sentences_per_doc: 6,
            val_docs_per_concept: 1,
            index_samples_per_concept: 2,
            ..WorldConfig::default()
        })
        .unwrap();
        let corpus = world.lm_corpus();
        let vocab = Vocab::train_bpe(corpus.iter(), 300).unwrap();
        let windows = pack_corpus(&corpus, &vocab, 32);
        let encoder = DualEncoder::untrained(EncoderConfig::desk(vocab.len()), &vocab, 2);
        Fixture { vocab, windows, encoder }
    })
}

fn random_index(dim: usize, entries: usize, seed: u64) -> VectorIndex {
    let mut index = VectorIndex::new(dim);
    let mut rng = Rng::new(seed);
    for i in 0..entries as u64 {
        let v: Vec<f32> = (0..dim).map(|_| rng.gaussian() as f32).collect();
        index.add(i, &v, None).unwrap();
    }
    index
}

fn small_model(vocab: &Vocab, mode: GroundingMode) -> Model {
    let cfg = BackboneConfig {
        layers: 3,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        max_seq_len: 48,
        vocab_size: vocab.len(),
        dropout_p: 0.1,
        tied_embeddings: true,
    };
    Model::new(cfg, mode, 32, vocab, 1).unwrap()
}

#[test]
fn too_few_steps_is_a_configuration_error() {
    let f = fixture();
    let model = small_model(&f.vocab, GroundingMode::none());
    let cfg = BenchConfig {
        steps: 5,
        warmup: 5,
        batch_size: 2,
        seq_len: 32,
        ..BenchConfig::default()
    };
    let enc_cfg = f.encoder.cfg.clone();
    assert!(matches!(
        measure_step_time(&model, &enc_cfg, &GroundingContext::ungrounded(), &f.windows, &cfg),
        Err(BenchError::TooFewSteps { .. })
    ));
}

#[test]
fn measured_ordering_none_direct_retrieval() {
    let f = fixture();
    let enc_cfg = f.encoder.cfg.clone();
    let index = random_index(enc_cfg.d_clip, 60_000, 5);
    let cfg = BenchConfig {
        steps: 9,
        warmup: 3,
        batch_size: 2,
        seq_len: 32,
        ..BenchConfig::default()
    };

    let none_model = small_model(&f.vocab, GroundingMode::none());
    let none = measure_step_time(
        &none_model,
        &enc_cfg,
        &GroundingContext::ungrounded(),
        &f.windows,
        &cfg,
    )
    .unwrap();

    let direct_model = small_model(&f.vocab, GroundingMode::direct_text(4));
    let direct = measure_step_time(
        &direct_model,
        &enc_cfg,
        &GroundingContext::direct(&f.encoder),
        &f.windows,
        &cfg,
    )
    .unwrap();

    let retr_model = small_model(&f.vocab, GroundingMode::image_retrieval(8, 4));
    let retrieval = measure_step_time(
        &retr_model,
        &enc_cfg,
        &GroundingContext::retrieval(&f.encoder, &index),
        &f.windows,
        &cfg,
    )
    .unwrap();

    // grounding adds encoder calls; retrieval adds searches on top
    assert!(
        none.mean_ms <= direct.mean_ms * 1.05,
        "none {:.3} vs direct {:.3}",
        none.mean_ms,
        direct.mean_ms
    );
    assert!(
        direct.mean_ms < retrieval.mean_ms,
        "direct {:.3} vs retrieval {:.3}",
        direct.mean_ms,
        retrieval.mean_ms
    );
    assert_eq!(direct.retrieval_mean_ms, 0.0);
    assert!(retrieval.retrieval_mean_ms > 0.0);
    assert!(retrieval.retrieval_share > 0.0 && retrieval.retrieval_share <= 1.0);

    let speedup = compare(&direct, &retrieval).unwrap();
    assert!(speedup > 1.0);

    let table = comparison_table(&[none, direct, retrieval]);
    assert!(table.contains("image-retrieval"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn compare_rejects_inverted_measurements() {
    let (cfg, enc) = bench_cfg_model();
    let direct_flops = count_flops(&cfg, &enc, GroundingMode::direct_text(2), 8, 0);
    let retr_flops = count_flops(&cfg, &enc, GroundingMode::image_retrieval(8, 2), 8, 1000);
    let mk = |mode: &str, mean: f64, flops: FlopBreakdown| CostReport {
        mode: mode.to_string(),
        steps_measured: 10,
        mean_ms: mean,
        p50_ms: mean,
        p95_ms: mean,
        retrieval_mean_ms: 0.0,
        retrieval_share: 0.0,
        flops,
        machine: machine_descriptor(),
    };
    // healthy case
    assert!(compare(
        &mk("direct-text", 10.0, direct_flops),
        &mk("image-retrieval", 20.0, retr_flops)
    )
    .is_ok());
    // inverted wall clock
    assert!(matches!(
        compare(
            &mk("direct-text", 30.0, direct_flops),
            &mk("image-retrieval", 20.0, retr_flops)
        ),
        Err(BenchError::Ordering(_))
    ));
    // inverted flops
    assert!(matches!(
        compare(
            &mk("direct-text", 10.0, retr_flops),
            &mk("image-retrieval", 20.0, direct_flops)
        ),
        Err(BenchError::Ordering(_))
    ));
}

#[test]
fn growing_the_index_does_not_speed_up_retrieval_steps() {
    let f = fixture();
    let enc_cfg = f.encoder.cfg.clone();
    let cfg = BenchConfig {
        steps: 8,
        warmup: 3,
        batch_size: 2,
        seq_len: 32,
        ..BenchConfig::default()
    };
    let mut means = Vec::new();
    for entries in [2_000usize, 20_000, 100_000] {
        let index = random_index(enc_cfg.d_clip, entries, 9);
        let model = small_model(&f.vocab, GroundingMode::image_retrieval(8, 4));
        let report = measure_step_time(
            &model,
            &enc_cfg,
            &GroundingContext::retrieval(&f.encoder, &index),
            &f.windows,
            &cfg,
        )
        .unwrap();
        means.push(report.mean_ms);
    }
    // allow a sliver of timer noise, never a real speedup
    assert!(means[1] >= means[0] * 0.9, "{means:?}");
    assert!(means[2] >= means[1] * 0.9, "{means:?}");
    assert!(means[2] > means[0], "{means:?}");
}

#[test]
fn report_line_is_a_record() {
    let (cfg, enc) = bench_cfg_model();
    let report = CostReport {
        mode: "none".to_string(),
        steps_measured: 4,
        mean_ms: 1.5,
        p50_ms: 1.4,
        p95_ms: 2.0,
        retrieval_mean_ms: 0.0,
        retrieval_share: 0.0,
        flops: count_flops(&cfg, &enc, GroundingMode::none(), 8, 0),
        machine: machine_descriptor(),
    };
    let line = report.to_line();
    for field in ["mode=none", "mean_ms=", "p95_ms=", "flops_total="] {
        assert!(line.contains(field), "{line}");
    }
}
