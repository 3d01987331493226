use rustfft::{num_complex::Complex, FftPlanner};
use sim_core::rng::Stream;
use sim_core::syllabgen::*;
use sim_core::Error;

fn power_spectrum(x: &[f32]) -> Vec<f64> {
    let n = x.len().next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2].iter().map(|c| c.norm_sqr()).collect()
}

fn energy_above(x: &[f32], hz: f64) -> f64 {
    let p = power_spectrum(x);
    let bin_hz = SAMPLE_RATE as f64 / (2 * p.len()) as f64;
    let total: f64 = p.iter().sum();
    let high: f64 = p.iter().enumerate().filter(|(i, _)| *i as f64 * bin_hz >= hz).map(|(_, v)| v).sum();
    high / total
}

#[test]
fn synthesis_is_deterministic_per_stream() {
    let a = synthesize_syllable('b', 'a', 200.0, &mut Stream::new(3, 1)).unwrap();
    let b = synthesize_syllable('b', 'a', 200.0, &mut Stream::new(3, 1)).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[1, 3200]);
}

#[test]
fn front_vowel_has_more_high_band_energy() {
    for seed in 0..5 {
        let ba = synthesize_syllable('b', 'a', 200.0, &mut Stream::new(seed, 0)).unwrap();
        let bi = synthesize_syllable('b', 'i', 200.0, &mut Stream::new(seed, 0)).unwrap();
        let (ra, ri) = (energy_above(ba.data(), 1800.0), energy_above(bi.data(), 1800.0));
        assert!(ri > ra, "seed {seed}: i {ri} vs a {ra}");
    }
}

#[test]
fn burst_centroid_follows_consonant() {
    let centroid = |c: char| {
        let s = synthesize_syllable(c, 'a', 150.0, &mut Stream::new(9, 0)).unwrap();
        // first 5 ms lie inside the burst for every draw
        let p = power_spectrum(&s.data()[..80]);
        let bin_hz = SAMPLE_RATE as f64 / (2 * p.len()) as f64;
        let total: f64 = p.iter().sum();
        p.iter().enumerate().map(|(i, v)| i as f64 * bin_hz * v).sum::<f64>() / total
    };
    let (b, g, d) = (centroid('b'), centroid('g'), centroid('d'));
    assert!(b < g && g < d, "b {b} g {g} d {d}");
}

#[test]
fn peak_is_normalized() {
    for (c, v) in [('b', 'a'), ('d', 'i'), ('g', 'u')] {
        let s = synthesize_syllable(c, v, 180.0, &mut Stream::new(1, 2)).unwrap();
        let peak = s.data().iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!((peak - 0.9).abs() <= 1e-4, "{peak}");
    }
}

#[test]
fn synthesis_rejects_bad_input() {
    let mut rng = Stream::new(0, 0);
    assert!(synthesize_syllable('p', 'a', 200.0, &mut rng).unwrap_err().to_string().contains("consonant"));
    assert!(synthesize_syllable('b', 'e', 200.0, &mut rng).unwrap_err().to_string().contains("vowel"));
    assert!(synthesize_syllable('b', 'a', 99.0, &mut rng).is_err());
    assert!(synthesize_syllable('b', 'a', 401.0, &mut rng).is_err());
}

#[test]
fn full_corpus_matches_clip_contract() {
    let corpus = generate_corpus(DEFAULT_CLIPS, 7).unwrap();
    assert_eq!(corpus.clips.len(), 851);
    let mut hist = [0usize; 9];
    for clip in &corpus.clips {
        assert_eq!(clip.samples.len(), 10240);
        assert!(clip.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
        let word = clip.word();
        let letters: Vec<char> = word.chars().filter(|c| *c != '-').collect();
        assert_eq!(letters.len(), 6);
        for (i, ch) in letters.iter().enumerate() {
            assert_eq!("bdg".contains(*ch), i % 2 == 0, "{word}");
            assert_eq!("aiu".contains(*ch), i % 2 == 1, "{word}");
        }
        let mut end = 0;
        for &(s, l) in &clip.bounds {
            assert!(s >= end && l > 0);
            end = s + l;
        }
        assert!(end <= 10240);
        for s in clip.syllables {
            hist[s.index()] += 1;
        }
    }
    let expected = 851.0 * 3.0 / 9.0;
    for (i, &h) in hist.iter().enumerate() {
        let dev = (h as f64 - expected).abs() / expected;
        assert!(dev <= 0.2, "syllable {i}: {h} vs {expected}");
    }
}

#[test]
fn corpus_generation_is_seeded() {
    assert_eq!(generate_corpus(20, 5).unwrap(), generate_corpus(20, 5).unwrap());
    assert_ne!(generate_corpus(20, 5).unwrap().clips, generate_corpus(20, 6).unwrap().clips);
    assert!(generate_corpus(9, 5).is_err());
}

#[test]
fn split_counts() {
    let mut c = generate_corpus(851, 7).unwrap();
    split_corpus(&mut c, 0.8, 7);
    assert_eq!(c.indices(Split::Train).len(), 680);
    assert_eq!(c.indices(Split::Test).len(), 171);

    let mut small = generate_corpus(10, 1).unwrap();
    split_corpus(&mut small, 0.8, 1);
    assert_eq!((small.indices(Split::Train).len(), small.indices(Split::Test).len()), (8, 2));

    let before = c.indices(Split::Test);
    split_corpus(&mut c, 0.8, 8);
    assert_eq!(c.indices(Split::Test).len(), 171);
    assert_ne!(c.indices(Split::Test), before);
}

#[test]
fn padding_puts_remainder_at_the_back() {
    let x = vec![1.0f32; 100];
    let p = pad_center(&x, 120).unwrap();
    assert_eq!(p.iter().position(|&v| v != 0.0), Some(10));
    assert_eq!(p.iter().rposition(|&v| v != 0.0), Some(109));
    let p = pad_center(&[1.0f32; 101], 120).unwrap();
    assert_eq!(p.iter().position(|&v| v != 0.0), Some(9));
    assert_eq!(p.iter().rposition(|&v| v != 0.0), Some(109));
    let full: Vec<f32> = (0..10240).map(|i| i as f32).collect();
    assert_eq!(pad_center(&full, 10240).unwrap(), full);
    assert!(pad_center(&[0.0; 5], 4).is_err());
}

#[test]
fn extracted_syllable_is_centered() {
    let corpus = generate_corpus(10, 3).unwrap();
    let clip = &corpus.clips[0];
    for i in 0..3 {
        let t = extract_padded_syllable(clip, i).unwrap();
        assert_eq!(t.shape(), &[1, 10240]);
        let (s, l) = clip.bounds[i];
        let front = (10240 - l) / 2;
        assert_eq!(&t.data()[front..front + l], &clip.samples[s..s + l]);
    }
    assert!(extract_padded_syllable(clip, 3).is_err());
}

#[test]
fn wav_round_trip_within_one_lsb() {
    let x: Vec<f32> = (0..10240).map(|i| ((i as f32) * 0.013).sin() * 0.95).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    write_wav(&path, &x).unwrap();
    let y = read_wav(&path).unwrap();
    assert_eq!(y.len(), x.len());
    let worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1.0 / 32767.0, "{worst}");

    let clipped = decode_wav(&encode_wav(&[2.0, -2.0]).unwrap()).unwrap();
    assert_eq!(clipped, vec![1.0, -1.0]);
}

/// RIFF/WAVE header for 16 mono 16-bit samples at 16 kHz, built byte by byte.
fn reference_header(data_bytes: u32, rate: u32, channels: u16, bits: u16) -> Vec<u8> {
    let mut h = Vec::new();
    h.extend_from_slice(b"RIFF");
    h.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    h.extend_from_slice(b"WAVE");
    h.extend_from_slice(b"fmt ");
    h.extend_from_slice(&16u32.to_le_bytes());
    h.extend_from_slice(&1u16.to_le_bytes());
    h.extend_from_slice(&channels.to_le_bytes());
    h.extend_from_slice(&rate.to_le_bytes());
    let block = channels * bits / 8;
    h.extend_from_slice(&(rate * block as u32).to_le_bytes());
    h.extend_from_slice(&block.to_le_bytes());
    h.extend_from_slice(&bits.to_le_bytes());
    h.extend_from_slice(b"data");
    h.extend_from_slice(&data_bytes.to_le_bytes());
    h
}

#[test]
fn wav_header_matches_reference_bytes() {
    let bytes = encode_wav(&[0.0; 16]).unwrap();
    let mut want = reference_header(32, 16000, 1, 16);
    want.extend_from_slice(&[0u8; 32]);
    assert_eq!(bytes, want);
    assert_eq!(
        &bytes[..16],
        &[0x52, 0x49, 0x46, 0x46, 0x44, 0, 0, 0, 0x57, 0x41, 0x56, 0x45, 0x66, 0x6d, 0x74, 0x20]
    );
}

#[test]
fn wav_reader_names_the_bad_field() {
    let field = |bytes: Vec<u8>| match decode_wav(&bytes).unwrap_err() {
        Error::Wav { field, .. } => field,
        e => panic!("unexpected {e}"),
    };
    let mut b = reference_header(4, 44100, 1, 16);
    b.extend_from_slice(&[0; 4]);
    assert_eq!(field(b), "sample_rate");
    let mut b = reference_header(4, 16000, 2, 16);
    b.extend_from_slice(&[0; 4]);
    assert_eq!(field(b), "channels");
    let mut b = reference_header(4, 16000, 1, 8);
    b.extend_from_slice(&[0; 4]);
    assert_eq!(field(b), "bits_per_sample");
}

#[test]
fn batches_drop_the_partial_tail_and_reshuffle_per_epoch() {
    let mut c = generate_corpus(851, 7).unwrap();
    split_corpus(&mut c, 0.8, 7);
    let e0 = c.batch_indices(Split::Train, 8, 1, 0);
    assert_eq!(e0.len(), 85);
    assert!(e0.iter().all(|b| b.len() == 8));
    assert_eq!(e0, c.batch_indices(Split::Train, 8, 1, 0));
    assert_ne!(e0, c.batch_indices(Split::Train, 8, 1, 1));
    let small = generate_corpus(13, 0).unwrap();
    let batches: Vec<_> = small.batch_iter(Split::Train, 4, 0, 0).collect::<Result<_, _>>().unwrap();
    assert_eq!(batches.len(), 3);
    assert_eq!(batches[0].shape(), &[4, 1, 10240]);
}

#[test]
fn corpus_save_load_round_trip() {
    let mut c = generate_corpus(12, 4).unwrap();
    split_corpus(&mut c, 0.8, 4);
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert!(manifest.starts_with("id\tfilename\tword\tsyllables\tvowels\tsplit"));
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.clips.len(), 12);
    for (a, b) in c.clips.iter().zip(&back.clips) {
        assert_eq!((&a.id, a.syllables, a.bounds, a.split), (&b.id, b.syllables, b.bounds, b.split));
        let worst = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 32767.0);
    }
}

fn band_features(x: &[f32]) -> Vec<f64> {
    let p = power_spectrum(x);
    let bands = 16;
    let per = p.len() / bands;
    let total: f64 = p.iter().sum();
    (0..bands).map(|b| p[b * per..(b + 1) * per].iter().sum::<f64>() / total).collect()
}

/// Nearest class mean under Euclidean distance is a linear decision rule.
#[test]
fn vowels_are_linearly_separable_from_band_energies() {
    let mut rng = Stream::new(11, 0);
    let mut data: Vec<(usize, Vec<f64>)> = Vec::new();
    for i in 0..180 {
        let syl = Syllable::from_index(i % 9).unwrap();
        let dur = rng.uniform_range(150.0, 205.0);
        let x = synthesize(syl, dur, &mut rng).unwrap();
        data.push((syl.vowel.index(), band_features(x.data())));
    }
    let (train, test) = data.split_at(120);
    let mut means = vec![vec![0.0; 16]; 3];
    let mut counts = [0.0; 3];
    for (y, f) in train {
        counts[*y] += 1.0;
        for (m, v) in means[*y].iter_mut().zip(f) {
            *m += v;
        }
    }
    for (m, c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let correct = test
        .iter()
        .filter(|(y, f)| {
            let d = |m: &Vec<f64>| m.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..3).min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b]))).unwrap() == *y
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.9, "vowel accuracy {acc}");
}
