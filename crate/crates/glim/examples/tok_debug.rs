use glim::config::RunConfig;
use glim::tokenizer::Vocab;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.out_dir = "/tmp/glim-v2".into();
    let vocab = Vocab::load(cfg.vocab_path()).unwrap();
    for text in [
        "a pabofol appeared by the door.",
        "a pabofol appeared by the",
        " door",
        "door",
        "the pabofol moved slowly.",
        "the pabofol moved",
    ] {
        let ids = vocab.encode(text);
        let toks: Vec<String> = ids
            .iter()
            .map(|&i| String::from_utf8_lossy(vocab.token_bytes(i)).into_owned())
            .collect();
        println!("{text:?}: {toks:?}");
    }
}
