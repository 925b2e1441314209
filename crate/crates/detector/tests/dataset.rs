use fmamba_detector::dataset::{load_dataset, save_dataset, synth_dataset, synth_scene, Modality};

#[test]
fn same_seed_gives_identical_datasets() {
    let a = synth_dataset(21, 6, 64, 3).unwrap();
    let b = synth_dataset(21, 6, 64, 3).unwrap();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.rgb.data().iter().zip(y.rgb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(x.ir.data().iter().zip(y.ir.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(x.boxes, y.boxes);
    }
    let c = synth_dataset(22, 6, 64, 3).unwrap();
    assert_ne!(a[0].rgb, c[0].rgb);
}

#[test]
fn boxes_lie_within_the_image() {
    for size in [64, 128] {
        for s in synth_dataset(5, 40, size, 4).unwrap() {
            assert!(!s.boxes.is_empty());
            for b in &s.boxes {
                assert!(0.0 <= b.x_min && b.x_min < b.x_max && b.x_max <= size as f32, "{b:?}");
                assert!(0.0 <= b.y_min && b.y_min < b.y_max && b.y_max <= size as f32, "{b:?}");
                assert!(b.class < 4);
            }
        }
    }
}

#[test]
fn each_object_is_faint_in_the_other_modality() {
    let mut checked = [0usize; 2];
    for id in 0..40 {
        let scene = synth_scene(8, id, 64, 2).unwrap();
        let s = &scene.sample;
        let size = s.image_size();
        // background level from pixels at least two pixels clear of every box
        let outside = |x: usize, y: usize| {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            scene.objects.iter().all(|o| {
                let g = &o.gt;
                px < g.x_min - 2.0 || px > g.x_max + 2.0 || py < g.y_min - 2.0 || py > g.y_max + 2.0
            })
        };
        let mut bg = [0.0f64; 4];
        let mut n_bg = 0.0;
        for y in 0..size {
            for x in 0..size {
                if outside(x, y) {
                    for c in 0..3 {
                        bg[c] += s.rgb.at(0, c, y, x) as f64;
                    }
                    bg[3] += s.ir.at(0, 0, y, x) as f64;
                    n_bg += 1.0;
                }
            }
        }
        bg.iter_mut().for_each(|v| *v /= n_bg);
        for o in &scene.objects {
            let mut sum = [0.0f64; 4];
            let mut n = 0.0;
            for y in 0..size {
                for x in 0..size {
                    if o.covers(x, y) {
                        for c in 0..3 {
                            sum[c] += s.rgb.at(0, c, y, x) as f64;
                        }
                        sum[3] += s.ir.at(0, 0, y, x) as f64;
                        n += 1.0;
                    }
                }
            }
            let delta: Vec<f64> = (0..4).map(|c| (sum[c] / n - bg[c]).abs()).collect();
            let rgb_contrast = (delta[0] + delta[1] + delta[2]) / 3.0;
            let ir_contrast = delta[3];
            match o.modality {
                Modality::Visible => {
                    assert!(ir_contrast <= 0.2 * rgb_contrast, "{id}: ir {ir_contrast} rgb {rgb_contrast}");
                    checked[0] += 1;
                }
                Modality::Thermal => {
                    assert!(rgb_contrast <= 0.2 * ir_contrast, "{id}: rgb {rgb_contrast} ir {ir_contrast}");
                    checked[1] += 1;
                }
            }
        }
    }
    assert!(checked.iter().all(|&n| n > 10), "{checked:?}");
}

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(2, 3, 64, 2).unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(dir.path(), 2).unwrap();
    assert_eq!(back, data);
}

#[test]
fn loader_reports_missing_and_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path().join("absent"), 2).is_err());
    let data = synth_dataset(2, 1, 64, 2).unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let boxes = dir.path().join("boxes_0.txt");
    std::fs::write(&boxes, "0 1 2 30 40\n1 five 2 3 4\n").unwrap();
    let err = load_dataset(dir.path(), 2).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
