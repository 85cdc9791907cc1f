use cvseq::dataset::{
    build_samples, generate_synthetic, load_sequences, read_manifest, read_manifest_str, resample_indices,
    resample_track, segment, write_manifest_string, write_synthetic, FrameRecord, PatchPolicy, SegmentRange,
    SegmentationParams, SyntheticConfig,
};
use cvseq::geo::{gps_to_pixel, haversine, GeoPoint, EARTH_RADIUS_M};
use cvseq::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn north_of(origin: GeoPoint, meters: f64) -> GeoPoint {
    GeoPoint {
        lat: origin.lat + (meters / EARTH_RADIUS_M).to_degrees(),
        lon: origin.lon,
    }
}

fn origin() -> GeoPoint {
    GeoPoint::new(49.01, 8.42).unwrap()
}

fn straight(n: usize, spacing: f64) -> Vec<GeoPoint> {
    (0..n).map(|i| north_of(origin(), i as f64 * spacing)).collect()
}

/// Plain transcription of the procedure: from anchor a find the first point
/// more than 50 m away, keep everything before it, restart from the middle.
fn segment_oracle(s: &[GeoPoint], p: &SegmentationParams) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut a = 0;
    loop {
        let mut x = None;
        for i in a + 1..s.len() {
            if haversine(s[a], s[i]) > p.max_span_m {
                x = Some(i);
                break;
            }
        }
        let last = match x {
            Some(x) => x - 1,
            None => s.len() - 1,
        };
        if last + 1 - a >= p.min_frames {
            out.push((a, last));
        }
        match x {
            None => return out,
            Some(_) => {
                let mid = a + (last - a) / 2;
                a = if mid > a { mid } else { a + 1 };
            }
        }
    }
}

fn random_polyline(rng: &mut ChaCha8Rng) -> Vec<GeoPoint> {
    let n = rng.random_range(1..80);
    let mut p = GeoPoint {
        lat: rng.random_range(-60.0..60.0),
        lon: rng.random_range(-170.0..170.0),
    };
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut out = vec![p];
    for _ in 1..n {
        heading += rng.random_range(-0.6..0.6);
        let step = rng.random_range(2.0..16.0);
        p = GeoPoint {
            lat: p.lat + (step * heading.cos() / EARTH_RADIUS_M).to_degrees(),
            lon: p.lon + (step * heading.sin() / (EARTH_RADIUS_M * p.lat.to_radians().cos())).to_degrees(),
        };
        out.push(p);
    }
    out
}

#[test]
fn segmentation_matches_oracle_on_random_polylines() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let p = SegmentationParams::default();
    for _ in 0..1000 {
        let s = random_polyline(&mut rng);
        let got: Vec<_> = segment(&s, &p).iter().map(|r| (r.start, r.end)).collect();
        assert_eq!(got, segment_oracle(&s, &p));
        let mut prev = None;
        for &(a, b) in &got {
            assert!(b + 1 - a >= p.min_frames);
            assert!(haversine(s[a], s[b]) <= p.max_span_m);
            assert!(prev.is_none_or(|q| a > q));
            prev = Some(a);
        }
    }
}

#[test]
fn straight_line_fixture() {
    let s = straight(12, 8.0);
    let ranges = segment(&s, &SegmentationParams::default());
    assert_eq!(ranges[0], SegmentRange { start: 0, end: 6 });
    assert_eq!(ranges[0].len(), 7);
    assert_eq!(ranges[0].midpoint(), 3);
    assert_eq!(ranges[1].start, 3);
    assert!(segment(&straight(5, 8.0), &SegmentationParams::default()).is_empty());
    assert!(SegmentationParams {
        min_frames: 1,
        ..Default::default()
    }
    .validate()
    .is_err());
}

#[test]
fn resampling_fixtures() {
    let track = straight(41, 1.0);
    assert_eq!(resample_indices(&track, 8.0).unwrap(), vec![0, 8, 16, 24, 32, 40]);
    assert_eq!(resample_track(&straight(5, 1.0), 8.0).unwrap().len(), 1);
    assert!(matches!(resample_track(&[], 8.0), Err(Error::Empty(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let s = random_polyline(&mut rng);
        let idx = resample_indices(&s, 8.0).unwrap();
        for w in idx.windows(2) {
            let path: f64 = (w[0]..w[1]).map(|i| haversine(s[i], s[i + 1])).sum();
            assert!(path >= 8.0 * (1.0 - 1e-9));
        }
    }
}

fn record(seq: &str, i: u64, p: GeoPoint) -> FrameRecord {
    FrameRecord {
        seq_id: seq.into(),
        frame_index: i,
        lat: p.lat,
        lon: p.lon,
        heading_deg: Some(0.0),
        image_path: Some(format!("img/{i}.png")),
        feature_path: None,
        sat_center_lat: None,
        sat_center_lon: None,
        sat_res_mpp: None,
        sat_size_px: None,
        sat_path: None,
        extra: Default::default(),
    }
}

#[test]
fn samples_center_on_the_midpoint() {
    let frames: Vec<_> = straight(7, 8.0).into_iter().enumerate().map(|(i, p)| record("drive", i as u64, p)).collect();
    let ranges = [SegmentRange { start: 0, end: 6 }];
    let policy = PatchPolicy {
        jitter_m: 0.0,
        ..Default::default()
    };
    let (samples, rejected) = build_samples(&ranges, &frames, &policy).unwrap();
    assert_eq!(rejected, 0);
    let s = &samples[0];
    assert_eq!(s.seq_id, "drive_0000");
    assert!((s.gt_pixels[3].0 - 128.0).abs() < 1e-9 && (s.gt_pixels[3].1 - 128.0).abs() < 1e-9);
    assert_eq!(s.model_scale, 2.5);
    let again = build_samples(&ranges, &frames, &PatchPolicy { seed: 99, ..policy }).unwrap();
    assert_eq!(again.0, samples);
}

#[test]
fn jittered_samples_stay_inside_or_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let track = random_polyline(&mut rng);
    let frames: Vec<_> = track.iter().enumerate().map(|(i, &p)| record("t", i as u64, p)).collect();
    let ranges = segment(&track, &SegmentationParams::default());
    let (samples, rejected) = build_samples(&ranges, &frames, &PatchPolicy::default()).unwrap();
    assert_eq!(samples.len() + rejected, ranges.len());
    for s in &samples {
        assert!(s.gt_pixels.iter().all(|&(u, v)| (0.0..256.0).contains(&u) && (0.0..256.0).contains(&v)));
        let center = haversine(s.patch.center, s.frames[(s.frames.len() - 1) / 2].gps());
        assert!(center <= 5.0 + 1e-6);
    }
    // a patch too small for a 48 m sequence rejects it
    let small = PatchPolicy {
        size_px: 100.0,
        model_px: 40.0,
        ..PatchPolicy::default()
    };
    let (kept, rejected) = build_samples(&[SegmentRange { start: 0, end: 6 }], &frames_straight(), &small).unwrap();
    assert!(kept.is_empty());
    assert_eq!(rejected, 1);
}

fn frames_straight() -> Vec<FrameRecord> {
    straight(7, 8.0).into_iter().enumerate().map(|(i, p)| record("s", i as u64, p)).collect()
}

#[test]
fn manifest_roundtrip_and_errors() {
    let mut frames = frames_straight();
    frames[2].extra.insert("camera".into(), serde_json::json!({"fov": 90}));
    frames[4].heading_deg = None;
    let text = write_manifest_string(&frames).unwrap();
    assert_eq!(read_manifest_str(&text).unwrap(), frames);
    assert_eq!(write_manifest_string(&read_manifest_str(&text).unwrap()).unwrap(), text);
    assert!(text.contains("\"camera\""));
    assert!(read_manifest_str("").unwrap().is_empty());

    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"seq_id\": \"s\", ";
    match read_manifest_str(&lines.join("\n")) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let missing = "{\"seq_id\": \"s\", \"frame_index\": 0, \"lat\": 1.0, \"image_path\": \"a.png\"}";
    assert!(matches!(read_manifest_str(missing), Err(Error::Schema { line: 1, .. })));
    let both = "{\"seq_id\": \"s\", \"frame_index\": 0, \"lat\": 1.0, \"lon\": 2.0, \"image_path\": \"a\", \"feature_path\": \"b\"}";
    assert!(matches!(read_manifest_str(both), Err(Error::Schema { line: 1, .. })));
    let dup = format!("{}\n{}", lines[0], lines[0]);
    assert!(matches!(read_manifest_str(&dup), Err(Error::Schema { line: 2, .. })));
}

fn small_synth(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        count: 20,
        seed,
        ..Default::default()
    }
}

#[test]
fn synthetic_is_deterministic_and_seed_dependent() {
    let a = generate_synthetic(&small_synth(1)).unwrap();
    assert_eq!(a, generate_synthetic(&small_synth(1)).unwrap());
    assert_ne!(a[0].satellite, generate_synthetic(&small_synth(2)).unwrap()[0].satellite);
    // sequence i does not depend on how many are generated
    let more = generate_synthetic(&SyntheticConfig {
        count: 25,
        ..small_synth(1)
    })
    .unwrap();
    assert_eq!(a[..], more[..20]);
    assert!(generate_synthetic(&SyntheticConfig { count: 0, ..small_synth(1) }).unwrap().is_empty());
    assert!(SyntheticConfig { dup_prob: 1.5, ..small_synth(1) }.validate().is_err());
}

#[test]
fn synthetic_structure() {
    let cfg = small_synth(3);
    let c = cfg.channels;
    for s in generate_synthetic(&cfg).unwrap() {
        assert_eq!(s.frames.len(), cfg.seq_len);
        for w in s.gt_pixels.windows(2) {
            let step = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            assert!((step - cfg.step_px).abs() < 1e-9);
        }
        let sat = s.satellite.data();
        for (t, d) in s.distractors.iter().enumerate() {
            let cell = s.cells[t];
            let (u, v) = s.gt_pixels[t];
            assert_eq!(cell, (v / 8.0) as usize * 32 + (u / 8.0) as usize);
            if let Some(d) = *d {
                assert_eq!(sat[cell * c..(cell + 1) * c], sat[d * c..(d + 1) * c]);
                for &p in &s.cells {
                    let dr = (d / 32) as f64 - (p / 32) as f64;
                    let dc = (d % 32) as f64 - (p % 32) as f64;
                    assert!(dr.hypot(dc) >= 10.0);
                }
            }
        }
    }
}

/// Index of the satellite cell closest to the landmark token; ties go to a coin flip.
fn nearest_cell(sat: &[f64], frame: &[f64], c: usize, rng: &mut ChaCha8Rng) -> usize {
    let dist = |k: usize| -> f64 { (0..c).map(|i| (sat[k * c + i] - frame[i]).powi(2)).sum() };
    let n = sat.len() / c;
    let best = (0..n).map(dist).fold(f64::INFINITY, f64::min);
    let ties: Vec<usize> = (0..n).filter(|&k| dist(k) == best).collect();
    ties[rng.random_range(0..ties.len())]
}

#[test]
fn noiseless_unique_worlds_are_solved_by_matching() {
    let cfg = SyntheticConfig {
        dup_prob: 0.0,
        noise: 0.0,
        ..small_synth(4)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in generate_synthetic(&cfg).unwrap() {
        for (t, f) in s.frames.iter().enumerate() {
            assert_eq!(nearest_cell(s.satellite.data(), f.data(), cfg.channels, &mut rng), s.cells[t]);
        }
    }
}

#[test]
fn duplicates_fool_memoryless_matching_half_the_time() {
    let cfg = SyntheticConfig {
        dup_prob: 1.0,
        noise: 0.0,
        count: 100,
        ..small_synth(5)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut dup, mut wrong) = (0, 0);
    for s in generate_synthetic(&cfg).unwrap() {
        for (t, f) in s.frames.iter().enumerate() {
            if s.distractors[t].is_some() {
                dup += 1;
                if nearest_cell(s.satellite.data(), f.data(), cfg.channels, &mut rng) != s.cells[t] {
                    wrong += 1;
                }
            }
        }
    }
    let rate = wrong as f64 / dup as f64;
    assert!(dup > 300 && (0.4..0.6).contains(&rate), "{wrong}/{dup}");
}

#[test]
fn written_synthetic_data_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = generate_synthetic(&SyntheticConfig { count: 3, ..small_synth(6) }).unwrap();
    let manifest = write_synthetic(&seqs, dir.path()).unwrap();
    let records = read_manifest(&manifest).unwrap();
    assert_eq!(records.len(), 18);
    let (loaded, dropped) = load_sequences(&records, dir.path(), 256, [1, 2]).unwrap();
    assert_eq!(dropped, 0);
    for (l, s) in loaded.iter().zip(&seqs) {
        assert_eq!(l.seq_id, s.seq_id);
        assert_eq!(l.satellite, s.satellite);
        assert_eq!(l.frames, s.frames);
        for (a, b) in l.gt_pixels.iter().zip(&s.gt_pixels) {
            assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        }
        let first = records.iter().find(|r| r.seq_id == s.seq_id).unwrap();
        let (u, v) = gps_to_pixel(first.gps(), &s.patch).unwrap();
        assert!((u / s.model_scale - s.gt_pixels[0].0).abs() < 1e-6 && (v / s.model_scale - s.gt_pixels[0].1).abs() < 1e-6);
    }
}
