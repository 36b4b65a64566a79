use mvanet_core::data::{Label, LoadedDataset};
use mvanet_core::model::{Model, NetworkSpec};
use mvanet_core::optim::{train_epochs, TrainConfig};
use mvanet_core::rng::Rng;
use mvanet_core::tensor::Tensor;

fn main() {
    let mut rng = Rng::new(60);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for i in 0..200 {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Attack };
        let base = if label == Label::Bonafide { 0.30 } else { 0.70 };
        images.push(Tensor::from_fn(&[1, 64, 64], |_| {
            (base + 0.05 * rng.next_gaussian()).clamp(0.0, 1.0) as f32
        }));
        labels.push(label);
        sources.push(format!("synthetic://{i}"));
    }
    let data = LoadedDataset { images, labels, sources };
    let mut model = Model::<f32>::new(NetworkSpec::small(), &mut Rng::new(61)).unwrap();
    let cfg = TrainConfig { epochs: 8, batch: 32, lr: 1e-3, weight_decay: 0.01, seed: 62 };
    let (log, _) = train_epochs(&mut model, &data, &cfg).unwrap();
    for e in &log {
        println!("epoch {} loss {:.4} acc {:.1}% ({:.2}s)", e.epoch, e.mean_loss, e.train_accuracy, e.wall_seconds);
    }
}
