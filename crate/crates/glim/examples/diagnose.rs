use glim::config::RunConfig;
use glim::eval::{self, EvalTask, Instance, ModelScorer, TaskKind};
use glim::fusion::GroundingContext;
use glim::grounding::{DualEncoder, LinearProbe};
use glim::tokenizer::Vocab;
use glim::train::load_model_checkpoint;
use glim::world::{World, COLORS};

fn main() {
    let out: std::path::PathBuf = std::env::args().nth(1).unwrap().into();
    let mut cfg = RunConfig::default();
    cfg.out_dir = out.clone();
    let vocab = Vocab::load(cfg.vocab_path()).unwrap();
    let encoder = DualEncoder::load(cfg.encoder_path()).unwrap();
    let (model, opt) = load_model_checkpoint(cfg.checkpoint_path("direct-text"), None).unwrap();
    println!("direct-text step {}", opt.step);
    println!("gates: {:?}", model.store.get("fusion.gates").data);

    // rebuild the world from the seed to get ground truth + probe split
    let world = World::generate(cfg.world_config()).unwrap();

    // 1. linear probe on encoder outputs, trained on non-probe, tested on probe
    let phrasings = ["a photo of a {}", "the {}", "an image of a {}"];
    let mut tf = Vec::new();
    let mut tl = Vec::new();
    let mut pf = Vec::new();
    let mut pl = Vec::new();
    for c in &world.concepts {
        for ph in &phrasings {
            let e = encoder.encode_text(&vocab.encode(&ph.replace("{}", &c.name))).unwrap();
            if c.probe {
                pf.push(e);
                pl.push(c.color);
            } else {
                tf.push(e);
                tl.push(c.color);
            }
        }
    }
    let probe = LinearProbe::train(&tf, &tl, COLORS.len(), 400, 1).unwrap();
    println!(
        "encoder color probe: train(non-probe) {:.3}, test(probe concepts) {:.3}",
        probe.accuracy(&tf, &tl),
        probe.accuracy(&pf, &pl)
    );

    // 2. LM color accuracy on NON-probe concepts (memorization available)
    //    vs probe concepts (grounding required)
    let template = EvalTask::parse(glim::eval::bundled::COLOR_MEMORY).unwrap();
    let make_task = |probe_flag: bool| -> EvalTask {
        let instances: Vec<Instance> = world
            .concepts
            .iter()
            .filter(|c| c.probe == probe_flag)
            .take(20)
            .map(|c| Instance {
                bindings: vec![
                    ("ITEM".to_string(), c.name.clone()),
                    ("DESCRIPTOR".to_string(), "a".to_string()),
                ],
                gold: COLORS[c.color].to_string(),
            })
            .collect();
        EvalTask {
            name: if probe_flag { "probe" } else { "seen" }.to_string(),
            kind: TaskKind::Classification,
            instances,
            ..template.clone()
        }
    };
    let scorer = ModelScorer::new(&model, GroundingContext::direct(&encoder));
    for flag in [false, true] {
        let task = make_task(flag);
        let report = eval::evaluate_classification(&scorer, &vocab, &task, true).unwrap();
        println!("LM color accuracy ({}): {:.3}", task.name, report.average);
    }
}
