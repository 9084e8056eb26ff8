use glim::config::RunConfig;
use glim::eval::{greedy_continuation, ModelScorer};
use glim::fusion::GroundingContext;
use glim::tokenizer::Vocab;
use glim::train::load_model_checkpoint;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.out_dir = "/tmp/glim-v2".into();
    let vocab = Vocab::load(cfg.vocab_path()).unwrap();
    let (model, _) = load_model_checkpoint(cfg.checkpoint_path("none"), None).unwrap();
    let scorer = ModelScorer::new(&model, GroundingContext::ungrounded());
    for ctx in [
        "the pabofol moved",
        "a pabofol appeared by the",
        "everyone looked at the",
        "nobody noticed the",
        "the pabofol was in the",
    ] {
        let cont = greedy_continuation(&scorer, &vocab, ctx, 6).unwrap();
        println!("{:?} -> {:?}", ctx, cont);
    }
}
