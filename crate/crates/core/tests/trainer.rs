use gsseg::error::Error;
use gsseg::eval::gaussian_accuracy;
use gsseg::projection::project;
use gsseg::rasterizer::render_semantic;
use gsseg::refine::segment;
use gsseg::synthetic::{generate, one_hot_scene, SynthFixture, SynthSpec};
use gsseg::trainer::{train, OptimizerKind, TrainConfig, TrainView};

fn views_of(fixture: &SynthFixture, take: usize) -> Vec<TrainView> {
    let k = fixture.scene.classes();
    fixture
        .views
        .iter()
        .take(take)
        .map(|v| TrainView::new(v.id, v.camera.clone(), v.labels.clone(), k).unwrap())
        .collect()
}

fn short(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        ..Default::default()
    }
}

#[test]
fn four_views_reach_low_loss_and_high_accuracy() {
    let fixture = generate(&SynthSpec::two_blob(11)).unwrap();
    let mut scene = fixture.scene.clone();
    let views = views_of(&fixture, 4);
    let report = train(&mut scene, &views, &TrainConfig::default(), &mut |_| {}).unwrap();
    assert!(report.final_loss < 0.05, "final loss {}", report.final_loss);
    assert!(report.final_loss < report.initial_loss);
    let acc = gaussian_accuracy(&segment(&scene), &fixture.planted).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn reported_objective_matches_independent_recomputation() {
    let fixture = generate(&SynthSpec::two_blob(3)).unwrap();
    let mut scene = fixture.scene.clone();
    let views = views_of(&fixture, 8);
    let cfg = short(40);
    let report = train(&mut scene, &views, &cfg, &mut |_| {}).unwrap();

    let k = scene.classes();
    let mut total = 0.0;
    for v in &views {
        let list = project(&scene, &v.camera, &cfg.projection);
        let (image, _) = render_semantic(&scene, &list, true, &cfg.raster);
        let n = v.label_map.len();
        let mut view_loss = 0.0;
        for class in 0..k {
            let mut l = 0.0;
            for (p, &label) in v.label_map.labels.iter().enumerate() {
                if label as usize == class {
                    l -= image.values.get(class, p).max(cfg.log_eps).ln();
                }
            }
            view_loss += l / n as f64;
        }
        total += view_loss / k as f64;
    }
    total /= views.len() as f64;
    assert!(
        (total - report.final_loss).abs() <= 1e-9,
        "{total} vs {}",
        report.final_loss
    );
    for (a, b) in report.final_view_losses.iter().zip(&views) {
        assert_eq!(a.id, b.id);
    }
}

#[test]
fn geometry_is_untouched() {
    let fixture = generate(&SynthSpec::two_blob(4)).unwrap();
    let mut scene = fixture.scene.clone();
    train(&mut scene, &views_of(&fixture, 8), &short(20), &mut |_| {}).unwrap();
    for (a, b) in scene.gaussians.iter().zip(&fixture.scene.gaussians) {
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.scale, b.scale);
        assert_eq!(a.rotation, b.rotation);
        assert_eq!(a.opacity.to_bits(), b.opacity.to_bits());
        assert_eq!(a.color_dc, b.color_dc);
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let fixture = generate(&SynthSpec::two_blob(8)).unwrap();
    let views = views_of(&fixture, 8);
    let cfg = TrainConfig {
        iterations: 30,
        batch: 3,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut scene = fixture.scene.clone();
            let report = train(&mut scene, &views, &cfg, &mut |_| {}).unwrap();
            let bits: Vec<u64> = scene
                .gaussians
                .iter()
                .flat_map(|g| g.object_code.iter().map(|c| c.to_bits()))
                .collect();
            (bits, report.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>())
        })
    };
    let one = run(1);
    assert_eq!(one, run(1));
    assert_eq!(one, run(3));
}

#[test]
fn zero_iterations_leave_codes_alone() {
    let fixture = generate(&SynthSpec::two_blob(1)).unwrap();
    let mut scene = fixture.scene.clone();
    let report = train(&mut scene, &views_of(&fixture, 2), &short(0), &mut |_| {}).unwrap();
    assert_eq!(scene, fixture.scene);
    assert!(report.losses.is_empty());
    assert_eq!(report.final_loss, report.initial_loss);
}

#[test]
fn confident_correct_codes_are_not_disturbed() {
    let fixture = generate(&SynthSpec::two_blob(6)).unwrap();
    let mut scene = one_hot_scene(&fixture.scene, &fixture.planted);
    for g in &mut scene.gaussians {
        g.object_code
            .iter_mut()
            .for_each(|c| *c = if *c > 0.5 { 10.0 } else { -10.0 });
    }
    let views = views_of(&fixture, 8);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let mut trained = scene.clone();
        let cfg = TrainConfig {
            iterations: 10,
            optimizer,
            ..Default::default()
        };
        let mut start = None;
        let mut worst: f64 = f64::NEG_INFINITY;
        let report = train(&mut trained, &views, &cfg, &mut |p| {
            let s = *start.get_or_insert(p.loss);
            worst = worst.max(p.loss - s);
        })
        .unwrap();
        assert!(worst <= 1e-4, "{optimizer:?}: loss rose by {worst}");
        assert!(report.final_loss <= report.initial_loss + 1e-4);
    }
}

#[test]
fn invalid_inputs_are_reported() {
    let fixture = generate(&SynthSpec::two_blob(2)).unwrap();
    let mut scene = fixture.scene.clone();
    assert!(train(&mut scene, &[], &short(5), &mut |_| {}).is_err());
    let views = views_of(&fixture, 2);
    let bad_batch = TrainConfig { batch: 3, ..short(5) };
    assert!(matches!(
        train(&mut scene, &views, &bad_batch, &mut |_| {}),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn non_finite_codes_abort_training() {
    let fixture = generate(&SynthSpec::two_blob(2)).unwrap();
    let mut scene = fixture.scene.clone();
    let views = views_of(&fixture, 8);
    let list = project(&scene, &views[0].camera, &Default::default());
    let visible = list.splats[0].gaussian_index;
    scene.gaussians[visible].object_code[1] = f64::NAN;
    assert!(matches!(
        train(&mut scene, &views, &short(5), &mut |_| {}),
        Err(Error::NonFiniteLoss { .. })
    ));
}
