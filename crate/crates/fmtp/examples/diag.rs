use fmtp::checkpoint;
use fmtp::data::{normalize, read_corpus, NormalizationMode, Trajectory};
use fmtp::num::{AdamConfig, AdamState, Rng, Tape};

fn recon_ade(vq: &fmtp::vq::VqModel<f32>, trajs: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for t in trajs {
        let (norm, _) = normalize(t, NormalizationMode::Translation);
        let rec = vq.reconstruct(&norm);
        total += rec.iter().zip(&norm.points).map(|(a, b)| a.dist(*b)).sum::<f64>();
        n += rec.len();
    }
    total / n as f64
}

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let corpus = read_corpus(std::path::Path::new(&format!("{dir}/corpus.fmds"))).unwrap();
    let mut vq = checkpoint::load_vq(std::path::Path::new(&format!("{dir}/vq.fmck"))).unwrap();
    let train: Vec<Trajectory> = corpus.train.trajectories.iter()
        .map(|t| normalize(t, NormalizationMode::Translation).0).collect();
    let frozen: Vec<Vec<usize>> = train.iter().map(|t| vq.tokenize(t).tokens).collect();
    println!("start: val recon ADE {:.4}", recon_ade(&vq, &corpus.val.trajectories));

    let mut adam = AdamState::new(AdamConfig::with_lr(2e-3), &vq.params);
    let mut rng = Rng::new(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..60 {
        rng.shuffle(&mut order);
        for chunk in order.chunks(8) {
            let mut tape = Tape::new();
            let bound = vq.params.bind(&mut tape);
            let mut acc = None;
            for &i in chunk {
                let fwd = vq.losses_with_assignments(&mut tape, &bound, &train[i], &frozen[i]).unwrap();
                acc = Some(match acc { None => fwd.reconstruction, Some(a) => tape.add(a, fwd.reconstruction).unwrap() });
            }
            let loss = tape.scale(acc.unwrap(), 1.0 / chunk.len() as f32);
            tape.backward(loss).unwrap();
            vq.params.pull_grads(&tape, &bound);
            // decoder-only: zero everyone else's grads
            for (name, t) in vq.params.iter_mut() {
                if !name.starts_with("dec.") { t.zero_grad(); }
            }
            adam.step(&mut vq.params).unwrap();
        }
        if epoch % 15 == 14 {
            println!("epoch {epoch}: val recon ADE {:.4}", recon_ade(&vq, &corpus.val.trajectories));
        }
    }
}
