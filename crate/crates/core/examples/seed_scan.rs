use mvanet_core::gradcheck::run_layer_suite;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().unwrap();
    // isolate the full-model entry by running the whole suite but reporting it
    let entries = run_layer_suite(seed, 20).unwrap();
    let worst_layer = entries[..entries.len() - 1]
        .iter()
        .map(|e| e.max_rel_err)
        .fold(0.0f64, f64::max);
    let model = entries.last().unwrap().max_rel_err;
    println!("seed {seed}: layers {worst_layer:.3e}  model {model:.3e}");
}
