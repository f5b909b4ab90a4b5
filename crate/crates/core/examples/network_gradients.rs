//! Builds the pixel network, checks its gradients against finite differences
//! and takes a few Adam steps on a toy batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectraseg::models::build_pixel_net;
use spectraseg::nnet::gradcheck::check_network;
use spectraseg::nnet::{cross_entropy, AdamConfig, AdamState, LayerSpec, Mode, Network, Tensor};
use spectraseg::Modality;

fn main() -> spectraseg::Result<()> {
    for m in [Modality::Hsi, Modality::Rgb, Modality::Tpi] {
        println!("pixel net for {m}: {} parameters", build_pixel_net(m, 19, 0)?.count_parameters());
    }

    let mut small = Network::new(
        vec![
            LayerSpec::Conv2d { in_ch: 2, out_ch: 4, kernel: 3, padding: 1 },
            LayerSpec::BatchNorm { features: 4 },
            LayerSpec::Elu,
            LayerSpec::MaxPool2d { kernel: 2 },
            LayerSpec::Upsample2d,
            LayerSpec::Conv2d { in_ch: 4, out_ch: 3, kernel: 1, padding: 0 },
        ],
        1,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(vec![2, 2, 6, 6], (0..144).map(|_| rng.gen::<f64>() - 0.5).collect())?;
    let report = check_network(&mut small, &x, 3)?;
    println!("gradient check: max rel err {:.2e} over {} entries", report.max_rel_err, report.checked);

    let mut net = build_pixel_net(Modality::Tpi, 3, 0)?;
    let spectra = Tensor::new(vec![6, 4], (0..24).map(|i| (i % 4) as f64 * 0.2 + (i / 12) as f64).collect())?;
    let targets = [0u8, 0, 0, 2, 2, 2];
    let mut adam = AdamState::new(AdamConfig { lr0: 0.01, ..AdamConfig::default() });
    for step in 0..30 {
        net.zero_grad();
        let logits = net.forward(spectra.clone(), Mode::Train, Some(&mut rng))?;
        let loss = cross_entropy(&logits, &targets, None)?;
        net.backward(loss.grad)?;
        adam.step(&mut net)?;
        if step % 10 == 0 {
            println!("step {step}: loss {:.4}", loss.value);
        }
    }
    Ok(())
}
