use mvanet_core::gradcheck::run_layer_suite;
fn main() {
    let t0 = std::time::Instant::now();
    let entries = run_layer_suite(1234, 20).unwrap();
    for e in &entries {
        println!("{:24} {:3} instances  max rel err {:.3e}", e.name, e.instances, e.max_rel_err);
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
