use glim::train::load_model_checkpoint;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let (model, opt) = load_model_checkpoint(&path, None).unwrap();
    println!("mode {} step {}", model.mode.as_str(), opt.step);
    let gates = &model.store.get("fusion.gates").data;
    println!("gates: {gates:?}");
    for name in ["fusion.wo", "fusion.proj.w", "fusion.null"] {
        let p = &model.store.get(name).data;
        let norm: f32 = p.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("{name}: l2 {norm:.4}");
    }
}
