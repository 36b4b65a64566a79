use mvanet_core::data::{generate, LoadedDataset, Profile, SynthConfig};
use mvanet_core::model::{Model, NetworkSpec};
use mvanet_core::optim::{train_epochs, TrainConfig};
use mvanet_core::rng::Rng;
use mvanet_core::tensor::stack;

fn accuracy(model: &Model<f32>, data: &LoadedDataset<f32>) -> (f64, f64, f64) {
    // returns (accuracy%, apcer%, bpcer%)
    let mut correct = 0usize;
    let (mut at, mut aab, mut bt, mut baa) = (0usize, 0usize, 0usize, 0usize);
    let mut idx = 0;
    while idx < data.len() {
        let hi = (idx + 32).min(data.len());
        let images: Vec<_> = (idx..hi).map(|i| &data.images[i]).collect();
        let x = stack(&images).unwrap();
        for (off, p) in model.predict(&x).unwrap().into_iter().enumerate() {
            let label = data.labels[idx + off];
            if p.label == label { correct += 1; }
            match label {
                mvanet_core::data::Label::Attack => { at += 1; if p.label != label { aab += 1; } }
                mvanet_core::data::Label::Bonafide => { bt += 1; if p.label != label { baa += 1; } }
            }
        }
        idx = hi;
    }
    (100.0 * correct as f64 / data.len() as f64,
     100.0 * aab as f64 / at.max(1) as f64,
     100.0 * baa as f64 / bt.max(1) as f64)
}

fn main() {
    let t0 = std::time::Instant::now();
    let dir = std::path::PathBuf::from("/tmp/desk_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let mut sets = std::collections::BTreeMap::new();
    for (profile, tag) in [(Profile::A, "A"), (Profile::B, "B"), (Profile::C, "C")] {
        let train = generate(&SynthConfig::new(500, profile, 101, 64).unwrap(), &dir.join(format!("{tag}_train"))).unwrap();
        let test = generate(&SynthConfig::new(250, profile, 201, 64).unwrap(), &dir.join(format!("{tag}_test"))).unwrap();
        sets.insert(format!("{tag}_train"), LoadedDataset::<f32>::load(&train, 64).unwrap());
        sets.insert(format!("{tag}_test"), LoadedDataset::<f32>::load(&test, 64).unwrap());
    }
    println!("generation+load: {:.1}s", t0.elapsed().as_secs_f64());

    let mut model = Model::<f32>::new(NetworkSpec::small(), &mut Rng::derive(7, 0)).unwrap();
    let t1 = std::time::Instant::now();
    for epoch in 0..15 {
        let cfg = TrainConfig { batch: 32, lr: 1e-4, weight_decay: 0.01, epochs: 1,
                                seed: Rng::derive(7, 100 + epoch).state() };
        let (log, _) = train_epochs(&mut model, &sets["A_train"], &cfg).unwrap();
        let (acc_a, _, _) = accuracy(&model, &sets["A_test"]);
        let (acc_b, apb, bpb) = accuracy(&model, &sets["B_test"]);
        let (acc_c, apc, bpc) = accuracy(&model, &sets["C_test"]);
        println!("epoch {:2}: train acc {:5.1}% loss {:.4} | A {:5.1}% | B {:5.1}% (AP {:4.1} BP {:4.1}) | C {:5.1}% (AP {:4.1} BP {:4.1}) [{:.1}s]",
            epoch, log[0].train_accuracy, log[0].mean_loss, acc_a, acc_b, apb, bpb, acc_c, apc, bpc,
            t1.elapsed().as_secs_f64());
    }
}
