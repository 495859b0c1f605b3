use dpenet_core::ops::gradcheck::{run_standard_suite, GradCheckConfig};

#[test]
fn every_block_and_loss_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    let reports = run_standard_suite(0..20, &cfg).unwrap();
    let mut failed = Vec::new();
    for (name, r) in &reports {
        println!(
            "{name:<16} checked {:>5} skipped {:>3} max rel {:.2e} worst {:?}",
            r.checked, r.skipped_at_kinks, r.max_rel_error, r.worst
        );
        assert!(r.checked > 0, "{name}: nothing checked");
        if r.max_rel_error >= 1e-5 {
            failed.push(name.clone());
        }
    }
    assert!(failed.is_empty(), "gradient mismatch in {failed:?}");
}

mod single_precision {
    use dpenet_core::blocks::*;
    use dpenet_core::ops::gradcheck::KinkRecorder;
    use dpenet_core::ops::{Ops, Tape};
    use dpenet_core::Tensor;
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f32 = 1e-3;
    const PER_TENSOR: usize = 16;
    /// The f32 difference quotient of a sum of order 100 carries about 1e-3
    /// of rounding, so smaller gradients are compared in absolute terms.
    const FLOOR: f64 = 0.1;

    enum Block {
        Conv(ConvLayer<f32>),
        Res(ResBlockParams<f32>),
        Ddrb(DdrbParams<f32>),
        Pdrb(PdrbParams<f32>),
        Pab(PabParams<f32>),
        Erpab(ErpabParams<f32>),
    }

    impl Block {
        fn forward<O: Ops<f32>>(&self, ops: &mut O, x: &O::Value) -> O::Value {
            match self {
                Block::Conv(p) => p.forward(ops, x, "conv"),
                Block::Res(p) => res_block_forward(ops, x, p),
                Block::Ddrb(p) => ddrb_forward(ops, x, p),
                Block::Pdrb(p) => pdrb_forward(ops, x, p),
                Block::Pab(p) => pab_forward(ops, x, p),
                Block::Erpab(p) => erpab_forward(ops, x, p),
            }
            .unwrap()
        }

        fn visitor(&mut self) -> &mut dyn LayerVisitor<f32> {
            match self {
                Block::Conv(p) => p,
                Block::Res(p) => p,
                Block::Ddrb(p) => p,
                Block::Pdrb(p) => p,
                Block::Pab(p) => p,
                Block::Erpab(p) => p,
            }
        }

        fn tensors(&mut self) -> Vec<&mut Tensor<f32>> {
            let mut out = Vec::new();
            self.visitor().visit_layers_mut("", &mut |_, l| {
                out.push(&mut l.weight);
                if let Some(b) = &mut l.bias {
                    out.push(b);
                }
            });
            out
        }

        fn set(&mut self, t: usize, i: usize, v: f32) {
            self.tensors().swap_remove(t).data_mut()[i] = v;
        }

        /// sum(out) and the sign of every ReLU input.
        fn sum(&self, x: &Tensor<f32>) -> (f64, Vec<bool>) {
            let mut rec = KinkRecorder::default();
            let y = self.forward(&mut rec, x);
            (y.data().iter().map(|&v| v as f64).sum(), rec.signs)
        }
    }

    /// Max relative error of d(sum(out))/d(param) against central differences,
    /// and the number of coordinates skipped because a ReLU input changed sign.
    fn max_rel_error(block: &mut Block, x: &Tensor<f32>, rng: &mut ChaCha8Rng) -> (f64, usize, usize) {
        let analytic: Vec<Tensor<f32>> = {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let y = block.forward(&mut tape, &xv);
            let grads = tape.backward(y);
            block
                .tensors()
                .into_iter()
                .map(|p| grads.of_param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect()
        };
        let base = block.sum(x).1;
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for (t, grad) in analytic.iter().enumerate() {
            let n = grad.len();
            for i in sample(rng, n, n.min(PER_TENSOR)) {
                let orig = block.tensors()[t].data()[i];
                block.set(t, i, orig + H);
                let (plus, sp) = block.sum(x);
                block.set(t, i, orig - H);
                let (minus, sm) = block.sum(x);
                block.set(t, i, orig);
                if sp != base || sm != base {
                    skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * H as f64);
                let a = grad.data()[i] as f64;
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(err);
                checked += 1;
            }
        }
        (worst, checked, skipped)
    }

    fn blocks(seed: u64) -> Vec<(&'static str, Block)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |spec: ConvSpec| {
            let mut l = ConvLayer::<f32>::init(spec, &mut rng);
            if let Some(b) = &mut l.bias {
                *b = Tensor::uniform(b.shape(), 0.1, &mut rng);
            }
            l
        };
        let ch = 3;
        vec![
            ("conv", Block::Conv(make(ConvSpec::new(3, 2, ch, ch)))),
            ("res_block", Block::Res(ResBlockParams::new(ch, (2, 2), &mut make))),
            ("ddrb", Block::Ddrb(DdrbParams::dilated_dense(ch, &mut make))),
            ("pdrb", Block::Pdrb(PdrbParams::new(ch, &mut make))),
            ("pab", Block::Pab(PabParams::new(ch, false, &mut make))),
            ("erpab", Block::Erpab(ErpabParams::new(ch, true, false, &mut make))),
        ]
    }

    #[test]
    fn blocks_match_finite_differences_in_f32() {
        let mut failed = Vec::new();
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for (name, mut block) in blocks(seed) {
                let x = Tensor::<f32>::uniform(&[1, 3, 8, 8], 1.0, &mut rng);
                let (err, checked, skipped) = max_rel_error(&mut block, &x, &mut rng);
                println!("seed {seed} {name:<10} checked {checked:>3} skipped {skipped:>3} max rel {err:.2e}");
                assert!(checked > 0, "{name}: every coordinate crossed a kink");
                if err >= 1e-2 {
                    failed.push((seed, name, err));
                }
            }
        }
        assert!(failed.is_empty(), "f32 gradient mismatch: {failed:?}");
    }
}
