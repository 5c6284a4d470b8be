use facectl_core::coretypes::AuVocabulary;
use facectl_core::data::Dataset;
use facectl_core::denoiser::Generator;
use facectl_core::seeds::{stream, sub_seed};
use facectl_core::training::{validation_loss, Branch, Stage, TrainConfig, Trainer};
use facectl_core::Profile;

#[test]
fn single_clip_overfits() {
    let vocab = AuVocabulary::default_arkit();
    let spec = facectl_core::data::SyntheticSpec { n_clips: 1, val_fraction: 0.0, ..Profile::Desk.data() };
    let data = Dataset::<f32>::generate(spec, &vocab).unwrap();
    let gen = Generator::<f32>::new(Profile::Desk.model(), &mut stream(1, "init", 0)).unwrap();
    let cfg = TrainConfig { iterations: 2000, seed: 7, ..Profile::Desk.train(Stage::Base) };
    let mut t = Trainer::new_base(cfg, gen).unwrap();
    let before = validation_loss(&t.generator, &t.schedule, &data.clips, None, 3).unwrap();
    t.run(&data.clips, |_, _| Ok(())).unwrap();
    let after = validation_loss(&t.generator, &t.schedule, &data.clips, None, 3).unwrap();
    println!("overfit: {before:.4} -> {after:.6} ({:.4}x)", after / before);
    assert!(after < 0.01 * before, "{after} is not below 1% of {before}");
}

#[test]
fn swap_branch_is_harder_early_on() {
    let vocab = AuVocabulary::default_arkit();
    let spec = facectl_core::data::SyntheticSpec { n_clips: 120, ..Profile::Desk.data() };
    let data = Dataset::<f32>::generate(spec, &vocab).unwrap();
    let gen = Generator::<f32>::new(Profile::Desk.model(), &mut stream(2, "init", 0)).unwrap();
    let cfg = TrainConfig { iterations: 300, seed: sub_seed(2, "train", 1), ..Profile::Desk.train(Stage::Base) };
    let mut base = Trainer::new_base(cfg, gen).unwrap();
    base.run(data.train(), |_, _| Ok(())).unwrap();

    let mut gen = base.generator;
    gen.insert_adapter(&mut stream(2, "adapter", 0)).unwrap();
    let cfg = TrainConfig { iterations: 200, seed: sub_seed(2, "train", 2), ..Profile::Desk.train(Stage::Fine) };
    let mut t = Trainer::new_fine(cfg, gen, vocab).unwrap();
    let (mut swap, mut simple) = (Vec::new(), Vec::new());
    t.run(data.train(), |_, r| {
        if let Some(p) = r.per_entry() {
            match r.branch {
                Branch::Swap => swap.push(p),
                Branch::Simple => simple.push(p),
            }
        }
        Ok(())
    })
    .unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("swap {:.5} over {} steps, simple {:.5} over {} steps", mean(&swap), swap.len(), mean(&simple), simple.len());
    assert!(swap.len() >= 50 && simple.len() >= 50);
    assert!(mean(&swap) > mean(&simple));
}
