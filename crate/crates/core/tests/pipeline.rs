use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmt::autograd::Tape;
use voxmt::backbone::{Backbone, BackboneGeometry};
use voxmt::cli::{cmd_eval, cmd_gen, cmd_infer, cmd_train, evaluate};
use voxmt::config::RunConfig;
use voxmt::io::{
    decode_checkpoint, decode_prediction, decode_scene, encode_checkpoint, encode_prediction,
    encode_scene, read_file, write_file,
};
use voxmt::model::{Model, Prediction};
use voxmt::params::ParamStore;
use voxmt::sparse::{Coord, SparseTensor};
use voxmt::voxel::PointCloud;
use voxmt::{Box9, Error, Mat};

const SMALL: &str =
    "[backbone]\nstem = 8\nwidths = [8, 8, 16, 16]\nextra = [16, 16]\nhfcm_width = 8\n";

fn f32_exact(v: f32) -> f64 {
    v as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scene_round_trip(seed in any::<u64>(), n in 0usize..100, channels in 3usize..6, labelled: bool, nboxes in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n * channels).map(|_| rng.random_range(-60.0f32..60.0)).collect();
        let mut pc = PointCloud::new(Mat::from_vec(n, channels, pts).unwrap()).unwrap();
        if labelled {
            pc.labels = Some((0..n).map(|_| rng.random_range(0..=16)).collect());
        }
        pc.boxes = (0..nboxes)
            .map(|_| {
                let mut v = [0f32; 9].map(|_| rng.random_range(-3.0f32..3.0));
                for s in &mut v[3..6] {
                    *s = s.abs() + 0.5;
                }
                let mut b = Box9::new(
                    [v[0], v[1], v[2]].map(f32_exact),
                    [v[3], v[4], v[5]].map(f32_exact),
                    f32_exact(v[6]),
                    rng.random_range(1..=16),
                );
                b.velocity = [f32_exact(v[7]), f32_exact(v[8])];
                b
            })
            .collect();
        let bytes = encode_scene(&pc).unwrap();
        prop_assert_eq!(&bytes[..4], b"LISD");
        prop_assert_eq!(decode_scene(&bytes).unwrap(), pc);
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(decode_scene(&longer).is_err());
        prop_assert!(decode_scene(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn prediction_and_checkpoint_reject_trailing_bytes() {
    let p = Prediction {
        labels: vec![1, 2, 3],
        boxes: vec![Box9::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.5], 0.25, 3).with_score(0.75)],
    };
    let mut bytes = encode_prediction(&p).unwrap();
    assert_eq!(decode_prediction(&bytes).unwrap(), p);
    bytes.push(7);
    assert!(decode_prediction(&bytes).is_err());

    let model = Model::<f32>::new(RunConfig::from_toml(SMALL).unwrap()).unwrap();
    let mut bytes = encode_checkpoint(&model).unwrap();
    assert_eq!(decode_checkpoint(&bytes).unwrap(), model);
    bytes.push(0);
    assert!(decode_checkpoint(&bytes).is_err());
}

#[test]
fn cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    std::fs::create_dir(p("scenes")).unwrap();
    cmd_gen(3, None, &p("scenes/a.lisd")).unwrap();
    let scene = read_file(&p("scenes/a.lisd"), decode_scene).unwrap();
    assert!(scene.labels.is_some() && !scene.boxes.is_empty());
    std::fs::write(p("cfg.toml"), SMALL).unwrap();

    // Zero steps stores the initialization untouched.
    let mut log = Vec::new();
    cmd_train(
        &p("cfg.toml"),
        &p("scenes"),
        &p("init.ckpt"),
        Some(0),
        &mut log,
    )
    .unwrap();
    assert!(log.is_empty());
    let fresh = Model::<f32>::new(RunConfig::from_toml(SMALL).unwrap()).unwrap();
    assert_eq!(
        std::fs::read(p("init.ckpt")).unwrap(),
        encode_checkpoint(&fresh).unwrap()
    );

    cmd_train(
        &p("cfg.toml"),
        &p("scenes"),
        &p("m.ckpt"),
        Some(2),
        &mut log,
    )
    .unwrap();
    let log = String::from_utf8(log).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("step=0 lr="), "{log}");

    cmd_infer(
        &p("m.ckpt"),
        &p("scenes/a.lisd"),
        &p("a.pred"),
        Some(&p("cfg.toml")),
    )
    .unwrap();
    let pred = read_file(&p("a.pred"), decode_prediction).unwrap();
    assert_eq!(pred.labels.len(), scene.len());
    let mut report = Vec::new();
    cmd_eval(&p("a.pred"), &p("scenes/a.lisd"), &mut report).unwrap();
    let report = String::from_utf8(report).unwrap();
    for line in report.lines() {
        assert!(
            line.split_once('=').is_some_and(|(k, _)| !k.is_empty()),
            "{line}"
        );
    }
    assert!(report.contains(&format!("points={}", scene.len())));

    // A different config is refused.
    std::fs::write(p("other.toml"), format!("seed = 5\n{SMALL}")).unwrap();
    let err = cmd_infer(
        &p("m.ckpt"),
        &p("scenes/a.lisd"),
        &p("b.pred"),
        Some(&p("other.toml")),
    )
    .unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch));

    // Empty scene in, empty prediction out.
    write_file(
        &p("empty.lisd"),
        &encode_scene(&PointCloud::new(Mat::zeros(0, 4)).unwrap()).unwrap(),
    )
    .unwrap();
    cmd_infer(&p("m.ckpt"), &p("empty.lisd"), &p("empty.pred"), None).unwrap();
    let pred = read_file(&p("empty.pred"), decode_prediction).unwrap();
    assert!(pred.labels.is_empty() && pred.boxes.is_empty());

    let err = cmd_train(
        &p("cfg.toml"),
        &p("missing"),
        &p("x.ckpt"),
        None,
        &mut Vec::new(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}

#[test]
fn perfect_and_hand_built_evaluation() {
    let mut gt = PointCloud::new(Mat::zeros(4, 4)).unwrap();
    gt.labels = Some(vec![1, 1, 2, 2]);
    gt.boxes = vec![Box9::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 2)];
    let perfect = Prediction {
        labels: vec![1, 1, 2, 2],
        boxes: gt.boxes.clone(),
    };
    let r = evaluate(&perfect, &gt).unwrap();
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.detection.map, 1.0);
    assert!(r.to_string().contains("miou_pct=100.0000"));

    let mixed = Prediction {
        labels: vec![1, 2, 1, 2],
        boxes: Vec::new(),
    };
    let text = evaluate(&mixed, &gt).unwrap().to_string();
    assert!(text.contains("miou_pct=33.3333"), "{text}");
    assert!(
        text.contains("iou_pct.1=33.3333") && text.contains("map=0.000000"),
        "{text}"
    );
}

fn backbone_run(coords: &[Coord]) -> voxmt::backbone::BackboneOutput {
    let cfg = RunConfig::from_toml(SMALL).unwrap().backbone;
    let net = Backbone::new(&cfg);
    let mut params = ParamStore::<f64>::new();
    net.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let shape = [64, 64, 32];
    let x = SparseTensor::new(
        coords,
        Mat::from_vec(coords.len(), 4, vec![0.5; coords.len() * 4]).unwrap(),
        1,
        shape,
    )
    .unwrap();
    let geo = BackboneGeometry::<f64>::build(x.coord_set(), shape, 1, &cfg).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let x0 = tape.leaf(x.features().clone());
    net.forward(&mut tape, &b, &geo, x0).unwrap()
}

#[test]
fn backbone_structure() {
    let out = backbone_run(&[]);
    assert!(out
        .enc
        .iter()
        .chain(&out.extra)
        .all(|l| l.coords.is_empty()));
    assert!(out.fd.coords.is_empty() && out.fs.coords.is_empty() && out.fused.coords.is_empty());

    let out = backbone_run(&[Coord::new(0, 40, 17, 9)]);
    let strides: Vec<u32> = out.enc.iter().chain(&out.extra).map(|l| l.stride).collect();
    assert_eq!(strides, [1, 2, 4, 8, 16, 32]);
    assert!(out
        .enc
        .iter()
        .chain(&out.extra)
        .all(|l| l.coords.len() == 1));
    assert_eq!(out.extra[1].coords.coords()[0], Coord::new(0, 1, 0, 0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let coords: Vec<Coord> = (0..300)
        .map(|_| {
            Coord::new(
                0,
                rng.random_range(0..64),
                rng.random_range(0..64),
                rng.random_range(0..32),
            )
        })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let out = backbone_run(&coords);
    for i in 0..3 {
        assert_eq!(out.dec[i].coords.coords(), out.enc[i].coords.coords());
    }
    assert_eq!(out.fs.coords.coords(), out.enc[3].coords.coords());
    assert_eq!(out.fused.coords.coords(), out.enc[0].coords.coords());
}

fn level(rng: &mut ChaCha8Rng, stride: u32, n: usize, c: usize) -> SparseTensor<f64> {
    let shape = [64u32, 64, 64];
    let ext = 64 / stride as i32;
    let coords: Vec<Coord> = (0..n)
        .map(|_| {
            Coord::new(
                0,
                rng.random_range(0..ext),
                rng.random_range(0..ext),
                rng.random_range(0..ext),
            )
        })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let feats = (0..coords.len() * c)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    SparseTensor::new(
        &coords,
        Mat::from_vec(coords.len(), c, feats).unwrap(),
        stride,
        shape,
    )
    .unwrap()
}

#[test]
fn merge_densities_and_bev_linearity() {
    use voxmt::backbone::{
        bev_project, hiam_detection_merge, hiam_segmentation_merge, Interpolation,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let f4 = level(&mut rng, 8, 30, 3);
        let f5 = level(&mut rng, 16, 12, 3);
        let f6 = level(&mut rng, 32, 5, 3);
        let fd = hiam_detection_merge(&f4, &f5, &f6).unwrap();
        assert!(fd.len() >= f4.len() && fd.len() <= f4.len() + f5.len() + f6.len());
        for mode in [Interpolation::InverseDistance, Interpolation::NearestActive] {
            assert_eq!(
                hiam_segmentation_merge(&f4, &f5, &f6, mode).unwrap().len(),
                f4.len()
            );
        }

        let noise = (0..fd.features().as_slice().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let g = fd
            .with_features(Mat::from_vec(fd.len(), fd.features().cols(), noise).unwrap())
            .unwrap();
        let (a, b) = (0.7, -1.3);
        let mut mix = fd.features().clone();
        for (m, (x, y)) in mix
            .as_mut_slice()
            .iter_mut()
            .zip(fd.features().as_slice().iter().zip(g.features().as_slice()))
        {
            *m = a * x + b * y;
        }
        let lhs = bev_project(&fd.with_features(mix).unwrap(), 1).unwrap();
        let (pf, pg) = (bev_project(&fd, 1).unwrap(), bev_project(&g, 1).unwrap());
        for ((l, x), y) in lhs
            .features
            .as_slice()
            .iter()
            .zip(pf.features.as_slice())
            .zip(pg.features.as_slice())
        {
            assert!((l - (a * x + b * y)).abs() < 1e-12);
        }
    }
}
