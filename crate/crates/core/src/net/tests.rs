use super::*;
use crate::camera::{ray_map, RigConfig};
use crate::gaussian::FEATURE;
use crate::mesh::{render_orthogonal_normalmaps, synth_humanoid, HumanoidParams};
use crate::render::{render_on_tape, RenderSettings};

fn tiny() -> NetConfig {
    NetConfig {
        resolution: 16,
        base_width: 8,
        multipliers: vec![1, 2, 4],
        output_ratio: 2,
        groups: 4,
        blocks: 1,
        hidden: 8,
        ..Default::default()
    }
}

struct Scene {
    image: Image,
    rays: RayMap,
    maps: Vec<NormalMap>,
    nrays: Vec<RayMap>,
}

impl Scene {
    fn inputs(&self) -> NetInputs<'_> {
        NetInputs { image: &self.image, rays: &self.rays, normal_maps: &self.maps, normal_rays: &self.nrays }
    }
}

fn scene(cfg: &NetConfig, seed: u64) -> Scene {
    let rig = RigConfig::default();
    let r = cfg.resolution;
    let pair = synth_humanoid(seed, &HumanoidParams { cell: 0.03, ..Default::default() }).unwrap();
    let cam = rig.camera(0.0, 0.0, r).unwrap();
    let image = crate::mesh::raster_mesh(&pair.body, &cam, crate::mesh::RasterMode::Rgb).unwrap().image;
    let maps = render_orthogonal_normalmaps(&pair.prior, &rig, r).unwrap().to_vec();
    let nrays = [0.0, 180.0, 90.0, 270.0]
        .iter()
        .map(|&az| ray_map(&rig.camera(az, 0.0, r / 2).unwrap()))
        .collect();
    Scene { image, rays: ray_map(&cam), maps, nrays }
}

fn run(cfg: &NetConfig, w: &ModelWeights, s: &Scene, g: SnmgMode, c: SnmcMode) -> (Tape<f64>, ParamVars, NetOutput) {
    let mut tape = Tape::new();
    let vars = w.register(&mut tape);
    let out = forward(&mut tape, &vars, cfg, &s.inputs(), g, c).unwrap();
    (tape, vars, out)
}

#[test]
fn config_validation() {
    assert!(NetConfig::default().validate().is_ok());
    let bad = [
        NetConfig { resolution: 60, ..Default::default() },
        NetConfig { output_ratio: 3, ..Default::default() },
        NetConfig { output_ratio: 8, ..Default::default() },
        NetConfig { groups: 5, ..Default::default() },
        NetConfig { multipliers: vec![1], ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    assert_eq!(NetConfig::default().map_size(), 32);
    assert_eq!(NetConfig { output_ratio: 4, ..Default::default() }.map_size(), 16);
}

#[test]
fn default_shapes_and_cardinality() {
    let cfg = NetConfig { blocks: 1, base_width: 8, groups: 4, hidden: 8, ..Default::default() };
    let w = init_weights(&cfg, 1).unwrap();
    let s = scene(&cfg, 3);
    let (tape, _, out) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::ThreeView);
    assert_eq!(tape.shape(out.f_l), &[1, 8, 32, 32]);
    assert_eq!(tape.shape(out.f_n.unwrap()), &[4, 8, 16, 16]);
    assert_eq!(tape.shape(out.theta), &[4096, RECORD_LEN]);
    assert_eq!(tape.shape(out.theta_prime.unwrap()), &[3072, RECORD_LEN]);
}

#[test]
fn ratio_quarter_shapes() {
    let cfg = NetConfig { output_ratio: 4, ..tiny() };
    let w = init_weights(&cfg, 1).unwrap();
    let s = scene(&cfg, 3);
    let (tape, _, out) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::FourView);
    assert_eq!(tape.shape(out.theta), &[4 * 16, RECORD_LEN]);
    assert_eq!(tape.shape(out.theta_prime.unwrap()), &[4 * 16, RECORD_LEN]);
}

#[test]
fn resolution_mismatch_is_config_error() {
    let cfg = tiny();
    let w = init_weights(&cfg, 0).unwrap();
    let s = scene(&NetConfig { resolution: 32, ..tiny() }, 0);
    let mut tape = Tape::<f64>::new();
    let vars = w.register(&mut tape);
    let r = forward(&mut tape, &vars, &cfg, &s.inputs(), SnmgMode::Off, SnmcMode::Off);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn init_is_seeded_and_counts_are_reproducible() {
    let cfg = tiny();
    let a = init_weights(&cfg, 5).unwrap();
    let b = init_weights(&cfg, 5).unwrap();
    let c = init_weights(&cfg, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.param_count(), c.param_count());
    a.check_layout().unwrap();
    assert!(a.params.contains_key("main.stem.weight"));
    assert!(a.params.contains_key("aux.enc0.0.norm1.gain"));
    assert!(a.params.contains_key("snmc.back.bias"));
    assert!(a.params["main.enc1.0.conv1.bias"].data().iter().all(|&v| v == 0.0));

    let d = init_weights(&NetConfig::default(), 0).unwrap();
    let n = d.param_count();
    assert!((1_000_000..=3_000_000).contains(&n), "{n}");
}

#[test]
fn head_bias_preset() {
    let w = init_weights(&tiny(), 0).unwrap();
    let b = w.params["guide.front.bias"].data();
    assert!((b[OPACITY] as f64 + 2.197).abs() < 1e-3);
    assert_eq!(b[ROT], 1.0);
    let sig = 1.0 / (1.0 + (-(b[OPACITY] as f64)).exp());
    assert!((sig - 0.1).abs() < 1e-6);
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = tiny();
    let w = init_weights(&cfg, 2).unwrap();
    let s = scene(&cfg, 2);
    let (t1, _, o1) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::ThreeView);
    let (t2, _, o2) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::ThreeView);
    assert_eq!(t1.value(o1.f_l), t2.value(o2.f_l));
    assert_eq!(t1.value(o1.theta), t2.value(o2.theta));
    assert_eq!(t1.value(o1.theta_prime.unwrap()), t2.value(o2.theta_prime.unwrap()));
}

fn aux_outputs(cfg: &NetConfig, w: &ModelWeights, maps: &[NormalMap], rays: &[RayMap]) -> Vec<Vec<f64>> {
    let mut tape = Tape::<f64>::new();
    let vars = w.register(&mut tape);
    let f_n = snmg_forward(&mut tape, &vars, cfg, maps, rays).unwrap();
    let per = tape.value(f_n).numel() / 4;
    tape.value(f_n).data().chunks(per).map(|c| c.to_vec()).collect()
}

#[test]
fn aux_branch_commutes_with_view_permutation() {
    let cfg = tiny();
    let w = init_weights(&cfg, 4).unwrap();
    let s = scene(&cfg, 4);
    let base = aux_outputs(&cfg, &w, &s.maps, &s.nrays);
    let perm = [2, 0, 3, 1];
    let maps: Vec<_> = perm.iter().map(|&i| s.maps[i].clone()).collect();
    let rays: Vec<_> = perm.iter().map(|&i| s.nrays[i].clone()).collect();
    let out = aux_outputs(&cfg, &w, &maps, &rays);
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(out[k], base[i]);
    }
}

#[test]
fn zero_inputs_give_identical_aux_views() {
    let cfg = tiny();
    let w = init_weights(&cfg, 4).unwrap();
    let n = cfg.normal_size();
    let zero = NormalMap { normals: Image::new(3, n, n), mask: Image::new(1, n, n) };
    let rays = RayMap { width: n, height: n, origins: vec![[0.0; 3]; n * n], directions: vec![[0.0; 3]; n * n] };
    let out = aux_outputs(&cfg, &w, &vec![zero; 4], &vec![rays; 4]);
    for v in 1..4 {
        assert_eq!(out[v], out[0]);
    }
}

#[test]
fn snmg_off_reduces_to_conv_of_f_l() {
    let cfg = tiny();
    let w = init_weights(&cfg, 6).unwrap();
    let s = scene(&cfg, 6);
    let (tape, vars, out) = run(&cfg, &w, &s, SnmgMode::Off, SnmcMode::Off);
    assert!(out.f_n.is_none());
    // Same path with an explicit zero F_n.
    let mut t2 = Tape::<f64>::new();
    let v2 = w.register(&mut t2);
    let f_l = shgm_forward(&mut t2, &v2, &cfg, &s.image, &s.rays).unwrap();
    let h = cfg.normal_size() / 2;
    let zero = t2.constant(Tensor::zeros(&[4, cfg.hidden, h, h]));
    let theta = guide_and_fuse(&mut t2, &v2, &cfg, f_l, Some(zero), SnmgMode::FourView).unwrap();
    let a = tape.value(out.theta).data();
    let b = t2.value(theta).data();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12);
    }
    let _ = vars;
}

#[test]
fn snmg_front_only_differs_only_in_front_map() {
    let cfg = tiny();
    let w = init_weights(&cfg, 7).unwrap();
    let s = scene(&cfg, 7);
    let (ta, _, a) = run(&cfg, &w, &s, SnmgMode::Off, SnmcMode::Off);
    let (tb, _, b) = run(&cfg, &w, &s, SnmgMode::FrontOnly, SnmcMode::Off);
    let per = cfg.map_size().pow(2) * RECORD_LEN;
    let (a, b) = (ta.value(a.theta).data(), tb.value(b.theta).data());
    assert_ne!(a[..per], b[..per]);
    assert_eq!(a[per..], b[per..]);
}

#[test]
fn snmc_off_leaves_theta_bit_identical() {
    let cfg = tiny();
    let w = init_weights(&cfg, 8).unwrap();
    let s = scene(&cfg, 8);
    let (ta, _, a) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::Off);
    let (tb, _, b) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::ThreeView);
    assert!(a.theta_prime.is_none());
    assert_eq!(ta.value(a.theta), tb.value(b.theta));
}

#[test]
fn theta_prime_features_are_unit() {
    let cfg = tiny();
    let w = init_weights(&cfg, 9).unwrap();
    let s = scene(&cfg, 9);
    let (tape, _, out) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::ThreeView);
    for r in tape.value(out.theta_prime.unwrap()).data().chunks(RECORD_LEN) {
        let n: f64 = r[FEATURE..FEATURE + 3].iter().map(|v| v * v).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
    }
}

fn grad_norm(w: &ModelWeights, grads: &BTreeMap<String, Tensor<f32>>, prefix: &str) -> f64 {
    w.params
        .keys()
        .filter(|k| k.starts_with(prefix))
        .map(|k| grads[k].squared_norm())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn rendered_loss_reaches_every_branch() {
    let cfg = tiny();
    let w = init_weights(&cfg, 10).unwrap();
    let s = scene(&cfg, 10);
    let rig = RigConfig::default();
    let (mut tape, vars, out) = run(&cfg, &w, &s, SnmgMode::FourView, SnmcMode::ThreeView);
    let settings = RenderSettings::default();
    let cam = rig.camera(30.0, 10.0, cfg.resolution).unwrap();
    let rgb = render_on_tape(&mut tape, out.theta, FeatureKind::Color, &cam, [1.0; 3], settings).unwrap();
    let side = rig.camera(90.0, 0.0, cfg.resolution).unwrap();
    let dir = render_on_tape(&mut tape, out.theta_prime.unwrap(), FeatureKind::Direction, &side, [0.0; 3], settings).unwrap();
    let t1 = tape.constant(Tensor::full(tape.shape(rgb), 0.3));
    let t2 = tape.constant(Tensor::full(tape.shape(dir), 0.3));
    let l1 = tape.mean_square(rgb, t1).unwrap();
    let l2 = tape.mean_square(dir, t2).unwrap();

    let mut g = tape.backward(l1).unwrap();
    let grads = w.collect_grads(&vars, &mut g);
    for prefix in ["main.", "aux.", "guide."] {
        assert!(grad_norm(&w, &grads, prefix) > 0.0, "{prefix}");
    }
    assert_eq!(grad_norm(&w, &grads, "snmc."), 0.0);

    let mut g = tape.backward(l2).unwrap();
    let grads = w.collect_grads(&vars, &mut g);
    for prefix in ["main.", "aux.", "snmc."] {
        assert!(grad_norm(&w, &grads, prefix) > 0.0, "{prefix}");
    }
    assert_eq!(grad_norm(&w, &grads, "guide."), 0.0);
}

#[test]
fn initial_cloud_is_visible() {
    let cfg = NetConfig::default();
    let w = init_weights(&cfg, 0).unwrap();
    let s = scene(&cfg, 0);
    let mut tape = Tape::<f32>::new();
    let vars = w.register(&mut tape);
    let out = forward(&mut tape, &vars, &cfg, &s.inputs(), SnmgMode::FourView, SnmcMode::Off).unwrap();
    let rig = RigConfig::default();
    let mut means = Vec::new();
    for az in [0.0, 90.0, 180.0, 270.0] {
        let cam = rig.camera(az, 0.0, cfg.resolution).unwrap();
        let img = render_on_tape(&mut tape, out.theta, FeatureKind::Color, &cam, [1.0; 3], RenderSettings::default()).unwrap();
        let v = tape.value(img).data();
        let n = v.len() / 4;
        means.push(v[3 * n..].iter().map(|&a| a as f64).sum::<f64>() / n as f64);
    }
    for m in means {
        assert!(m > 0.01 && m < 0.9, "alpha mean {m}");
    }
}
