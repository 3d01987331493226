//! Formant synthesis of consonant-vowel syllables.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::rng::Stream;

pub const SAMPLE_RATE: u32 = 16_000;
pub const F0_HZ: f64 = 120.0;
pub const PEAK: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Consonant {
    B,
    D,
    G,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Vowel {
    A,
    I,
    U,
}

impl Consonant {
    pub const ALL: [Consonant; 3] = [Consonant::B, Consonant::D, Consonant::G];

    /// Spectral centroid of the release burst.
    pub fn burst_hz(self) -> f64 {
        match self {
            Consonant::B => 500.0,
            Consonant::D => 2500.0,
            Consonant::G => 1500.0,
        }
    }

    /// F2 at voicing onset: low for labials, mid for alveolars, high for velars.
    pub fn locus_hz(self) -> f64 {
        match self {
            Consonant::B => 900.0,
            Consonant::D => 1800.0,
            Consonant::G => 2600.0,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Consonant::B => 'b',
            Consonant::D => 'd',
            Consonant::G => 'g',
        }
    }
}

impl Vowel {
    pub const ALL: [Vowel; 3] = [Vowel::A, Vowel::I, Vowel::U];

    /// First and second formant frequencies.
    pub fn formants(self) -> (f64, f64) {
        match self {
            Vowel::A => (800.0, 1200.0),
            Vowel::I => (300.0, 2300.0),
            Vowel::U => (300.0, 800.0),
        }
    }

    pub fn letter(self) -> char {
        match self {
            Vowel::A => 'a',
            Vowel::I => 'i',
            Vowel::U => 'u',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<char> for Consonant {
    type Error = Error;

    fn try_from(c: char) -> Result<Self> {
        match c {
            'b' => Ok(Consonant::B),
            'd' => Ok(Consonant::D),
            'g' => Ok(Consonant::G),
            _ => Err(Error::InvalidArgument(format!("unknown consonant `{c}`"))),
        }
    }
}

impl TryFrom<char> for Vowel {
    type Error = Error;

    fn try_from(c: char) -> Result<Self> {
        match c {
            'a' => Ok(Vowel::A),
            'i' => Ok(Vowel::I),
            'u' => Ok(Vowel::U),
            _ => Err(Error::InvalidArgument(format!("unknown vowel `{c}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Syllable {
    pub consonant: Consonant,
    pub vowel: Vowel,
}

impl Syllable {
    pub fn all() -> impl Iterator<Item = Syllable> {
        Consonant::ALL
            .into_iter()
            .flat_map(|consonant| Vowel::ALL.into_iter().map(move |vowel| Syllable { consonant, vowel }))
    }

    /// Class index in `0..9`, consonant-major.
    pub fn index(self) -> usize {
        self.consonant as usize * 3 + self.vowel as usize
    }

    pub fn from_index(i: usize) -> Option<Syllable> {
        Syllable::all().nth(i)
    }
}

impl fmt::Display for Syllable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.consonant.letter(), self.vowel.letter())
    }
}

impl FromStr for Syllable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next(), chars.next()) {
            (Some(c), Some(v), None) => Ok(Syllable {
                consonant: Consonant::try_from(c)?,
                vowel: Vowel::try_from(v)?,
            }),
            _ => Err(Error::InvalidArgument(format!("`{s}` is not a syllable"))),
        }
    }
}

/// Two-pole resonator, unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bandwidth / fs).exp();
        let theta = 2.0 * PI * freq / fs;
        let a1 = 2.0 * r * theta.cos();
        let a2 = -r * r;
        // |H(e^{jθ})| = 1 at the centre frequency
        let re = 1.0 - a1 * theta.cos() - a2 * (2.0 * theta).cos();
        let im = a1 * theta.sin() + a2 * (2.0 * theta).sin();
        Self {
            a1,
            a2,
            gain: (re * re + im * im).sqrt(),
            y1: 0.0,
            y2: 0.0,
        }
    }

    /// Move the centre frequency, keeping the filter state.
    fn retune(&mut self, freq: f64, bandwidth: f64) {
        let fresh = Self::new(freq, bandwidth);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.gain = fresh.gain;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const BURST_BANDWIDTH_HZ: f64 = 600.0;
const F1_BANDWIDTH_HZ: f64 = 90.0;
const F2_BANDWIDTH_HZ: f64 = 120.0;
const F2_LEVEL: f64 = 0.6;
const BURST_LEVEL: f64 = 0.6;
const ATTACK_MS: f64 = 15.0;
/// F2 glides from the consonant's locus to the vowel target over this span.
const TRANSITION_MS: f64 = 40.0;
const RELEASE_MS: f64 = 40.0;

fn ms_to_samples(ms: f64) -> usize {
    (ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
}

/// One syllable: a 5–15 ms noise burst shaped around the consonant's
/// centroid, then a two-formant vowel on a 120 Hz pulse train whose F2
/// starts at the consonant's locus. Peak is 0.9.
pub fn synthesize_syllable(consonant: char, vowel: char, dur_ms: f64, rng: &mut Stream) -> Result<Tensor> {
    let syl = Syllable {
        consonant: Consonant::try_from(consonant)?,
        vowel: Vowel::try_from(vowel)?,
    };
    synthesize(syl, dur_ms, rng)
}

pub fn synthesize(syl: Syllable, dur_ms: f64, rng: &mut Stream) -> Result<Tensor> {
    if !(100.0..=400.0).contains(&dur_ms) {
        return Err(Error::InvalidArgument(format!(
            "syllable duration {dur_ms} ms outside [100, 400]"
        )));
    }
    let total = ms_to_samples(dur_ms);
    let burst_len = ms_to_samples(rng.uniform_range(5.0, 15.0)).min(total);
    let mut out = vec![0.0f64; total];

    let mut burst = Resonator::new(syl.consonant.burst_hz(), BURST_BANDWIDTH_HZ);
    let burst_wave: Vec<f64> = (0..burst_len)
        .map(|i| (PI * (i as f64 + 0.5) / burst_len as f64).sin() * burst.tick(rng.normal() as f64))
        .collect();

    let (f1, f2) = syl.vowel.formants();
    let mut r1 = Resonator::new(f1, F1_BANDWIDTH_HZ);
    let mut r2 = Resonator::new(syl.consonant.locus_hz(), F2_BANDWIDTH_HZ);
    let period = SAMPLE_RATE as f64 / F0_HZ;
    let mut next_pulse = rng.uniform() * period;
    let vowel_len = total - burst_len;
    let attack = ms_to_samples(ATTACK_MS) as f64;
    let release = ms_to_samples(RELEASE_MS) as f64;
    let transition = ms_to_samples(TRANSITION_MS) as f64;
    let locus = syl.consonant.locus_hz();
    let vowel_wave: Vec<f64> = (0..vowel_len)
        .map(|i| {
            let t = i as f64;
            let excitation = if t >= next_pulse {
                next_pulse += period;
                1.0
            } else {
                0.0
            };
            if t < transition {
                let w = t / transition;
                r2.retune((1.0 - w) * locus + w * f2, F2_BANDWIDTH_HZ);
            } else if t == transition {
                r2.retune(f2, F2_BANDWIDTH_HZ);
            }
            let y = r1.tick(excitation) + F2_LEVEL * r2.tick(excitation);
            let rise = (t / attack).min(1.0);
            let fall = ((vowel_len as f64 - t) / release).min(1.0);
            y * rise * fall
        })
        .collect();

    // The two parts are levelled separately: a resonator's response to
    // sparse pulses is far weaker than to white noise.
    let level = |w: &[f64]| w.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let (bl, vl) = (level(&burst_wave), level(&vowel_wave));
    for (o, b) in out.iter_mut().zip(&burst_wave) {
        *o = BURST_LEVEL * b / bl;
    }
    for (o, v) in out[burst_len..].iter_mut().zip(&vowel_wave) {
        *o = v / vl;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak <= 0.0 {
        return Err(Error::NonFinite("silent syllable".into()));
    }
    let scale = PEAK as f64 / peak;
    let data = out.into_iter().map(|v| (v * scale) as f32).collect::<Vec<_>>();
    Tensor::new(vec![1, total], data)
}
