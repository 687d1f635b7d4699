use xmodal::cli::temporal_poses;
use xmodal::image::{read_bundle, write_bundle};
use xmodal::synth::{demo_scene, desk_rig, NoiseSpec};

#[test]
fn rendered_bundle_with_temporal_frames_roundtrips() {
    let scene = demo_scene("desk").unwrap();
    let rig = desk_rig(24, 16, 24, 12);
    let noise = NoiseSpec { pol_sigma: 0.01, corr_sigma: 0.02, seed: 4, ..Default::default() };
    let mut b = scene.render_frame(&rig, &noise, 42).unwrap();
    b.temporal = scene.render_temporal(&rig, &temporal_poses(2), &noise).unwrap();
    let t = tempfile::tempdir().unwrap();
    write_bundle(&b, t.path()).unwrap();
    let r = read_bundle(t.path()).unwrap();
    assert_eq!(r.frame_id, 42);
    assert_eq!(r.rig, b.rig);
    assert_eq!(r.temporal.len(), 2);
    for (x, y) in b.temporal.iter().zip(&r.temporal) {
        assert_eq!(x.pose, y.pose);
        assert_eq!(x.image.0.data(), y.image.0.data());
    }
    assert_eq!(b.pol_left.0.data(), r.pol_left.0.data());
    assert_eq!(b.corr.0.data(), r.corr.0.data());
    let bits = |d: &xmodal::image::DepthField| d.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(b.gt_depth.as_ref().unwrap()), bits(r.gt_depth.as_ref().unwrap()));
}

#[test]
fn missing_channel_file_is_reported() {
    let b = demo_scene("tiny").unwrap().render_frame(&desk_rig(8, 8, 8, 8), &NoiseSpec::default(), 0).unwrap();
    let t = tempfile::tempdir().unwrap();
    write_bundle(&b, t.path()).unwrap();
    std::fs::remove_file(t.path().join("corr.f32")).unwrap();
    assert!(read_bundle(t.path()).is_err());
}
