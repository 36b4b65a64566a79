use mvanet_core::model::{Label, Model, NetworkSpec};
use mvanet_core::rng::Rng;
use mvanet_core::tape::{Mode, Tape};
use mvanet_core::tensor::Tensor;

fn main() {
    // reproduce suite entry 8 instances and find first failing coordinate
    for k in 0..20u64 {
        let mut rng = Rng::derive(7, (8u64) << 32 | k);
        let mut model = Model::<f64>::new(NetworkSpec::small_gradcheck(), &mut rng).unwrap();
        for t in model.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.uniform::<f64>(-0.1, 0.1);
            }
        }
        let model = model;
        let x = Tensor::uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut rng);
        let labels = [Label::Bonafide, Label::Attack];
        let names = model.param_names();
        let inputs: Vec<Tensor<f64>> = model.param_tensors().into_iter().cloned().collect();

        let eval = |tensors: &[Tensor<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<_> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let mut m = model.clone();
            let bound = m.bound_from_ordered(&vars).unwrap();
            let masks = m.draw_branch_masks(2).unwrap();
            let xv = tape.leaf(x.clone(), false);
            let out = m.build(&mut tape, &bound, xv, Mode::Train, Some(&masks), None).unwrap();
            let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            let loss = tape.softmax_cross_entropy(out.logits, &idx).unwrap();
            let lv = tape.value(loss).item();
            let g = if grad {
                tape.backward(loss).unwrap();
                vars.iter().map(|&v| tape.grad(v).data().to_vec()).collect()
            } else { vec![] };
            (lv, g)
        };

        let (_, analytic) = eval(&inputs, true);
        let mut worst = (0.0f64, String::new(), 0usize, 0.0f64, 0.0f64);
        for (pi, t) in inputs.iter().enumerate() {
            for j in 0..t.numel() {
                let a = analytic[pi][j];
                let mut num = |eps: f64| {
                    let mut w = inputs.clone();
                    w[pi].data_mut()[j] += eps;
                    let (lp, _) = eval(&w, false);
                    w[pi].data_mut()[j] -= 2.0 * eps;
                    let (lm, _) = eval(&w, false);
                    (lp - lm) / (2.0 * eps)
                };
                let n1 = num(1e-6);
                let rel = (a - n1).abs() / a.abs().max(n1.abs()).max(1e-12);
                if rel > worst.0 {
                    worst = (rel, names[pi].clone(), j, a, n1);
                }
            }
        }
        if worst.0 > 1e-4 {
            println!("instance {k}: WORST {} [{}] rel {:.3e} analytic {:+.6e} numeric {:+.6e}",
                worst.1, worst.2, worst.0, worst.3, worst.4);
            // scale study on that coordinate
            let pi = names.iter().position(|n| *n == worst.1).unwrap();
            for eps in [1e-5, 1e-6, 1e-7, 1e-8] {
                let mut w = inputs.clone();
                w[pi].data_mut()[worst.2] += eps;
                let (lp, _) = eval(&w, false);
                w[pi].data_mut()[worst.2] -= 2.0 * eps;
                let (lm, _) = eval(&w, false);
                println!("   eps {eps:.0e}: numeric {:+.6e}", (lp - lm) / (2.0 * eps));
            }
            break;
        } else {
            println!("instance {k}: clean (max rel {:.3e})", worst.0);
        }
    }
}
