//! Scratch diagnostic (not shipped): iris-pixel evidence in model renders.
use gazelab::geometry::GazeAngles;
use gazelab::harness::checkpoint::Checkpoint;
use gazelab::pixels::{save_png, ImageGrid};
use gazelab::synth::{orbit_camera, render_ground_truth, Dataset, SyntheticSubject};
use nalgebra::Vector3;

fn iris_weight(px: &Vector3<f64>, s: &SyntheticSubject) -> f64 {
    let fit = |albedo: &Vector3<f64>| -> (f64, f64) {
        let sc = (px.dot(albedo) / albedo.dot(albedo)).clamp(0.0, 1.2);
        ((px - albedo * sc).norm(), sc)
    };
    let iris = Vector3::from(s.iris_albedo);
    let skin = Vector3::from(s.skin_albedo);
    let sclera = Vector3::from(s.sclera_albedo);
    let (r_iris, s_iris) = fit(&iris);
    let (r_skin, _) = fit(&skin);
    let (r_sclera, _) = fit(&sclera);
    let ramp = (1.0 - r_iris / 0.15).max(0.0);
    let bright = ((s_iris - 0.10) / 0.10).clamp(0.0, 1.0);
    let sig = |x: f64| 1.0 / (1.0 + (-x / 0.02).exp());
    ramp * bright * sig(r_skin - r_iris) * sig(r_sclera - r_iris)
}

fn count(img: &ImageGrid, s: &SyntheticSubject) -> (usize, f64) {
    let (h, w, _) = img.dim();
    let mut n = 0;
    let mut tot = 0.0;
    for i in 0..h {
        for j in 0..w {
            let px = Vector3::new(img[[i, j, 0]], img[[i, j, 1]], img[[i, j, 2]]);
            let wgt = iris_weight(&px, s);
            if wgt > 0.2 {
                n += 1;
            }
            tot += wgt;
        }
    }
    (n, tot)
}

fn main() {
    let base = std::env::temp_dir();
    let ds = Dataset::open(&base.join("gzl_pilot_train")).unwrap();
    let ckpt = Checkpoint::load(&base.join("gzl_pilotb_run/checkpoint.bin")).unwrap();
    let gcfg = &ds.manifest.config;
    let gaze = GazeAngles::new(0.15, -0.3).unwrap();
    let head = GazeAngles::new(0.05, 0.1).unwrap();
    let pose = orbit_camera(head, gcfg.distance_mm);
    let intr = gcfg.intrinsics();
    for sid in [0u32, 3] {
        let r = ckpt.model.render(&ckpt.model.latents[&sid], gaze, &pose, &intr, 7).unwrap();
        let subject = ds.subject(sid).unwrap();
        let gt = render_ground_truth(subject, gaze, head, gcfg).unwrap();
        let (ng, tg) = count(&gt.image, subject);
        let (nr, tr) = count(&r.whole, subject);
        println!("subject {sid}: gt strong {ng} (sum {tg:.1}); render strong {nr} (sum {tr:.1})");
        save_png(&r.whole, &base.join(format!("probe_b_{sid}.png"))).unwrap();
        save_png(&r.eyes, &base.join(format!("probe_b_{sid}_eyes.png"))).unwrap();
        save_png(&gt.image, &base.join(format!("probe_b_{sid}_gt.png"))).unwrap();
    }
    // training-view reconstruction quality
    let s0 = ds.load(0).unwrap();
    let r0 = ckpt.model.render(&ckpt.model.latents[&s0.subject_id], s0.gaze, &s0.camera, &s0.intrinsics, 7).unwrap();
    let mad: f64 = (&r0.whole - &s0.image).mapv(f64::abs).mean().unwrap();
    println!("train-view MAD {mad:.4}");
    save_png(&r0.whole, &base.join("probe_b_recon.png")).unwrap();
    save_png(&s0.image, &base.join("probe_b_recon_gt.png")).unwrap();
}
