//! Formant-synthesis corpora standing in for recorded command speech.
//!
//! Each speaker gets a persistent voice (pitch, vocal-tract length, accent
//! offsets per phone, per-keyword speaking habits, breathiness, spectral tilt,
//! microphone colouring, noise floor); each clip adds token-level jitter in
//! timing, pitch, formants, placement and noise. Clips are written as
//! `<root>/<subject>/<keyword>/<clip>.wav`.

use crate::dataset::{DIGIT_KEYWORDS, INSPECTION_KEYWORDS};
use crate::error::{IoContext, Result};
use crate::frontend::write_wav;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;
const FS: f64 = SAMPLE_RATE as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lexicon {
    Inspection,
    Digits,
}

impl Lexicon {
    pub fn keywords(self) -> &'static [&'static str] {
        match self {
            Lexicon::Inspection => &INSPECTION_KEYWORDS,
            Lexicon::Digits => &DIGIT_KEYWORDS,
        }
    }

    /// ARPAbet-style pronunciation.
    pub fn phones(self, keyword: usize) -> &'static [&'static str] {
        match self {
            Lexicon::Inspection => match keyword {
                0 => &["B", "ER", "D", "Z"],
                1 => &["T", "AE", "S", "K"],
                2 => &["W", "AH", "N"],
                3 => &["T", "UW"],
                4 => &["TH", "R", "IY"],
                5 => &["F", "AO", "R"],
                6 => &["B", "AE", "K", "W", "ER", "D"],
                7 => &["K", "AH", "N", "T", "IH", "N", "Y", "UW"],
                8 => &["HH", "AH", "V", "ER"],
                _ => &["S", "T", "AA", "P"],
            },
            Lexicon::Digits => match keyword {
                0 => &["Z", "IY", "R", "OW"],
                1 => &["W", "AH", "N"],
                2 => &["T", "UW"],
                3 => &["TH", "R", "IY"],
                4 => &["F", "AO", "R"],
                5 => &["F", "AY", "V"],
                6 => &["S", "IH", "K", "S"],
                7 => &["S", "EH", "V", "AH", "N"],
                8 => &["EY", "T"],
                _ => &["N", "AY", "N"],
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Vowel,
    Glide,
    Nasal,
    Fricative { voiced: bool, fc: f64, bw: f64, level: f64 },
    Stop { voiced: bool, burst: f64 },
    Aspirate,
}

#[derive(Clone, Copy, Debug)]
struct PhoneSpec {
    kind: Kind,
    /// F1..F3 at onset and offset (Hz, adult male reference).
    start: [f64; 3],
    end: [f64; 3],
    dur_ms: f64,
}

fn phone(name: &str) -> PhoneSpec {
    let v = |f: [f64; 3], d| PhoneSpec { kind: Kind::Vowel, start: f, end: f, dur_ms: d };
    let dip = |a: [f64; 3], b: [f64; 3], d| PhoneSpec { kind: Kind::Vowel, start: a, end: b, dur_ms: d };
    let g = |f: [f64; 3], d| PhoneSpec { kind: Kind::Glide, start: f, end: f, dur_ms: d };
    let n = |f: [f64; 3], d| PhoneSpec { kind: Kind::Nasal, start: f, end: f, dur_ms: d };
    let fr = |voiced, fc, bw, level, d| PhoneSpec {
        kind: Kind::Fricative { voiced, fc, bw, level },
        start: [400.0, 1500.0, 2500.0],
        end: [400.0, 1500.0, 2500.0],
        dur_ms: d,
    };
    let st = |voiced, burst, f: [f64; 3]| PhoneSpec { kind: Kind::Stop { voiced, burst }, start: f, end: f, dur_ms: 75.0 };
    match name {
        "IY" => v([270.0, 2290.0, 3010.0], 150.0),
        "IH" => v([390.0, 1990.0, 2550.0], 110.0),
        "EH" => v([530.0, 1840.0, 2480.0], 120.0),
        "AE" => v([660.0, 1720.0, 2410.0], 160.0),
        "AH" => v([520.0, 1190.0, 2390.0], 110.0),
        "AA" => v([730.0, 1090.0, 2440.0], 160.0),
        "AO" => v([570.0, 840.0, 2410.0], 160.0),
        "UW" => v([300.0, 870.0, 2240.0], 160.0),
        "ER" => v([490.0, 1350.0, 1690.0], 150.0),
        "AY" => dip([730.0, 1090.0, 2440.0], [390.0, 1990.0, 2550.0], 220.0),
        "OW" => dip([570.0, 840.0, 2410.0], [330.0, 900.0, 2300.0], 200.0),
        "EY" => dip([530.0, 1840.0, 2480.0], [290.0, 2200.0, 2900.0], 200.0),
        "W" => g([300.0, 700.0, 2200.0], 60.0),
        "Y" => g([280.0, 2250.0, 3000.0], 55.0),
        "R" => g([420.0, 1300.0, 1600.0], 70.0),
        "N" => n([250.0, 1700.0, 2600.0], 75.0),
        "S" => fr(false, 6000.0, 1800.0, 1.0, 120.0),
        "Z" => fr(true, 5500.0, 1800.0, 0.7, 110.0),
        "F" => fr(false, 4500.0, 5000.0, 0.35, 110.0),
        "V" => fr(true, 3500.0, 4000.0, 0.3, 80.0),
        "TH" => fr(false, 5000.0, 4500.0, 0.3, 110.0),
        "HH" => PhoneSpec { kind: Kind::Aspirate, start: [520.0, 1190.0, 2390.0], end: [520.0, 1190.0, 2390.0], dur_ms: 70.0 },
        "B" => st(true, 900.0, [300.0, 900.0, 2200.0]),
        "P" => st(false, 900.0, [300.0, 900.0, 2200.0]),
        "D" => st(true, 4000.0, [350.0, 1700.0, 2600.0]),
        "T" => st(false, 4200.0, [350.0, 1700.0, 2600.0]),
        "K" => st(false, 2200.0, [350.0, 2000.0, 2400.0]),
        other => panic!("phone `{other}` missing from the inventory"),
    }
}

/// Persistent voice of one synthetic speaker.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Voice {
    pub subject_id: u32,
    pub female: bool,
    pub f0: f64,
    /// Formant scale from vocal-tract length.
    pub vtl: f64,
    pub rate: f64,
    pub breath: f64,
    pub tilt: f64,
    pub eq_center: f64,
    pub eq_gain: f64,
    pub snr_db: f64,
    pub pitch_slope: f64,
    /// Multiplicative F1/F2/F3 offsets per phone (accent).
    pub accent: BTreeMap<String, [f64; 3]>,
    /// Per-keyword duration scale and pitch shift (speaking habits).
    pub habits: Vec<(f64, f64)>,
}

const INVENTORY: [&str; 27] = [
    "IY", "IH", "EH", "AE", "AH", "AA", "AO", "UW", "ER", "AY", "OW", "EY", "W", "Y", "R", "N", "S", "Z", "F", "V",
    "TH", "HH", "B", "P", "D", "T", "K",
];

impl Voice {
    /// Voice for `subject_id` under corpus seed `seed`; odd ids are male, even ids female.
    pub fn for_subject(subject_id: u32, n_keywords: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (subject_id as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let female = subject_id % 2 == 0;
        let f0 = if female { rng.random_range(170.0..250.0) } else { rng.random_range(90.0..140.0) };
        let vtl = if female { rng.random_range(1.08..1.24) } else { rng.random_range(0.86..1.04) };
        let accent = INVENTORY
            .iter()
            .map(|p| {
                let o = [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12), rng.random_range(-0.06..0.06)];
                (p.to_string(), o.map(|x| 1.0 + x))
            })
            .collect();
        let habits = (0..n_keywords).map(|_| (rng.random_range(0.7..1.4), rng.random_range(0.85..1.18))).collect();
        Self {
            subject_id,
            female,
            f0,
            vtl,
            rate: rng.random_range(0.8..1.25),
            breath: rng.random_range(0.0..0.35),
            tilt: rng.random_range(0.0..0.7),
            eq_center: rng.random_range(400.0..4000.0),
            eq_gain: rng.random_range(-0.6..1.5),
            snr_db: rng.random_range(20.0..35.0),
            pitch_slope: rng.random_range(-0.5..0.2),
            accent,
            habits,
        }
    }
}

/// Klatt-style two-pole resonator.
#[derive(Clone, Copy, Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    #[inline]
    fn step(&mut self, x: f64, f: f64, bw: f64) -> f64 {
        let f = f.clamp(50.0, FS * 0.45);
        let r = (-PI * bw / FS).exp();
        let c1 = 2.0 * r * (2.0 * PI * f / FS).cos();
        let c2 = -r * r;
        let a = 1.0 - c1 - c2;
        let y = a * x + c1 * self.y1 + c2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

struct Segment {
    len: usize,
    start: [f64; 3],
    end: [f64; 3],
    voice: f64,
    aspiration: f64,
    frication: f64,
    fc: f64,
    bw: f64,
    burst: Option<(usize, f64)>,
    nasal: bool,
}

/// Renders one utterance, already placed inside a `len`-sample window.
pub fn render_utterance(voice: &Voice, lexicon: Lexicon, keyword: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (dur_scale, pitch_shift) = voice.habits[keyword];
    let token_rate = voice.rate * rng.random_range(0.9..1.1);
    let token_f0 = voice.f0 * pitch_shift * rng.random_range(0.94..1.06);
    let jit = Normal::new(0.0, 0.035).expect("valid sigma");

    let mut segs = Vec::new();
    let phones = lexicon.phones(keyword);
    for (pi, &name) in phones.iter().enumerate() {
        let p = phone(name);
        let acc = voice.accent.get(name).copied().unwrap_or([1.0; 3]);
        let scale = |f: [f64; 3], j: [f64; 3]| -> [f64; 3] {
            [0, 1, 2].map(|i| f[i] * voice.vtl * acc[i] * (1.0 + j[i]))
        };
        let j: [f64; 3] = [jit.sample(rng), jit.sample(rng), jit.sample(rng)];
        let (start, end) = (scale(p.start, j), scale(p.end, j));
        let ms = p.dur_ms * dur_scale / token_rate * rng.random_range(0.88..1.12);
        let n = (ms * FS / 1000.0) as usize;
        let next_vowel = phones[pi + 1..].iter().map(|&q| phone(q)).find(|q| matches!(q.kind, Kind::Vowel | Kind::Glide));
        let base = Segment {
            len: n,
            start,
            end,
            voice: 0.0,
            aspiration: 0.0,
            frication: 0.0,
            fc: 0.0,
            bw: 0.0,
            burst: None,
            nasal: false,
        };
        match p.kind {
            Kind::Vowel => segs.push(Segment { voice: 1.0, ..base }),
            Kind::Glide => segs.push(Segment { voice: 0.75, ..base }),
            Kind::Nasal => segs.push(Segment { voice: 0.35, nasal: true, ..base }),
            Kind::Fricative { voiced, fc, bw, level } => segs.push(Segment {
                voice: if voiced { 0.3 } else { 0.0 },
                frication: level,
                fc: fc * voice.vtl.sqrt(),
                bw,
                ..base
            }),
            Kind::Aspirate => {
                let f = next_vowel.map(|q| scale(q.start, j)).unwrap_or(start);
                segs.push(Segment { aspiration: 0.5, start: f, end: f, ..base })
            }
            Kind::Stop { voiced, burst } => {
                let closure = (n as f64 * 0.6) as usize;
                segs.push(Segment { len: closure, voice: if voiced { 0.12 } else { 0.0 }, ..base });
                let rel = n - closure;
                let asp = if voiced { 0.05 } else { 0.45 };
                let f = next_vowel.map(|q| scale(q.start, j)).unwrap_or(start);
                segs.push(Segment {
                    len: rel,
                    start,
                    end: f,
                    voice: if voiced { 0.4 } else { 0.0 },
                    aspiration: asp,
                    frication: 0.0,
                    fc: 0.0,
                    bw: 0.0,
                    burst: Some(((0.012 * FS) as usize, burst * voice.vtl.sqrt())),
                    nasal: false,
                });
            }
        }
    }

    let total: usize = segs.iter().map(|s| s.len).sum::<usize>().min(len);
    let mut out = vec![0.0f64; total];
    let white = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut formants = [Resonator::default(); 5];
    let mut fric = Resonator::default();
    let mut fric2 = Resonator::default();
    let mut eq = Resonator::default();
    let (mut phase, mut g_prev, mut tilt_state) = (0.0f64, 0.0f64, 0.0f64);
    let (mut av, mut an, mut af) = (0.0f64, 0.0f64, 0.0f64);
    let smooth = (-1.0 / (0.004 * FS)).exp();
    let mut t = 0usize;
    for s in &segs {
        for i in 0..s.len {
            if t >= total {
                break;
            }
            let u = i as f64 / s.len.max(1) as f64;
            let f: [f64; 3] = [0, 1, 2].map(|k| s.start[k] + (s.end[k] - s.start[k]) * u);
            av = smooth * av + (1.0 - smooth) * s.voice;
            an = smooth * an + (1.0 - smooth) * s.aspiration;
            af = smooth * af + (1.0 - smooth) * s.frication;

            let rel = t as f64 / total as f64;
            let f0 = token_f0 * (1.0 + voice.pitch_slope * (rel - 0.3)) * (1.0 + 0.01 * white(rng));
            phase += f0 / FS;
            if phase >= 1.0 {
                phase -= 1.0;
            }
            let g = if phase < 0.4 {
                0.5 * (1.0 - (PI * phase / 0.4).cos())
            } else if phase < 0.6 {
                (PI * (phase - 0.4) / 0.4).cos()
            } else {
                0.0
            };
            let glottal = (g - g_prev) * 12.0;
            g_prev = g;
            let noise = white(rng);
            let src = av * glottal * (1.0 - voice.breath) + (an + av * voice.breath * 0.3) * noise * 0.4;
            if let Some((blen, bfc)) = s.burst {
                if i < blen {
                    let b = fric2.step(white(rng), bfc, 1500.0) * 1.5;
                    out[t] += b;
                }
            }
            let bws = [60.0, 90.0, 130.0, 180.0, 260.0];
            let mut y = src;
            let nasal_scale = if s.nasal { [0.8, 1.0, 1.0] } else { [1.0; 3] };
            for k in 0..3 {
                y = formants[k].step(y, f[k] * nasal_scale[k], bws[k] * if s.nasal { 2.0 } else { 1.0 });
            }
            y = formants[3].step(y, 3500.0 * voice.vtl, bws[3]);
            y = formants[4].step(y, 4500.0 * voice.vtl, bws[4]);
            if af > 1e-4 {
                y += af * fric.step(noise, s.fc.max(1000.0), s.bw.max(500.0)) * 0.6;
            }
            out[t] += y;
            t += 1;
        }
    }

    // microphone colouring, spectral tilt, level
    for v in out.iter_mut() {
        let e = eq.step(*v, voice.eq_center, voice.eq_center * 0.5);
        let x = *v + voice.eq_gain * e;
        tilt_state = (1.0 - voice.tilt) * x + voice.tilt * tilt_state;
        *v = tilt_state;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let level = rng.random_range(0.25..0.6) / peak;
    let speech_power = out.iter().map(|v| (v * level).powi(2)).sum::<f64>() / total.max(1) as f64;
    let noise_sd = (speech_power / 10f64.powf(voice.snr_db / 10.0)).sqrt();

    let slack = len.saturating_sub(total);
    let jitter = (0.1 * FS) as i64;
    let centre = (slack / 2) as i64 + rng.random_range(-jitter..=jitter);
    let off = centre.clamp(0, slack as i64) as usize;
    let mut clip = vec![0.0f32; len];
    for (i, c) in clip.iter_mut().enumerate() {
        let s = if i >= off && i < off + total { out[i - off] * level } else { 0.0 };
        *c = (s + noise_sd * white(rng)) as f32;
    }
    clip
}

/// What to synthesise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub lexicon: Lexicon,
    pub subjects: Vec<u32>,
    pub clips_per_keyword: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// Eight inspectors saying the ten inspection commands fifty times each.
    pub fn inspection(seed: u64) -> Self {
        Self { lexicon: Lexicon::Inspection, subjects: (1..=8).collect(), clips_per_keyword: 50, seed }
    }

    /// Spoken digits from the given speakers (the full set is 1..=60), fifty each.
    pub fn digits(subjects: impl IntoIterator<Item = u32>, seed: u64) -> Self {
        Self { lexicon: Lexicon::Digits, subjects: subjects.into_iter().collect(), clips_per_keyword: 50, seed }
    }
}

fn clip_rng(seed: u64, subject: u32, keyword: usize, clip: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((subject as u64) << 32) | ((keyword as u64) << 16) | clip as u64);
    r
}

/// Clip samples for one (subject, keyword, clip) of `spec`; deterministic.
pub fn render_clip(spec: &CorpusSpec, voice: &Voice, keyword: usize, clip: usize) -> Vec<f32> {
    let len = (1.5 * FS) as usize;
    let mut rng = clip_rng(spec.seed, voice.subject_id, keyword, clip);
    render_utterance(voice, spec.lexicon, keyword, len, &mut rng)
}

/// Writes the corpus under `root`; existing files are kept. Returns the number of clips written.
pub fn generate_corpus(root: &Path, spec: &CorpusSpec) -> Result<usize> {
    let kws = spec.lexicon.keywords();
    let mut written = 0;
    for &s in &spec.subjects {
        let voice = Voice::for_subject(s, kws.len(), spec.seed);
        for (k, name) in kws.iter().enumerate() {
            let dir = root.join(s.to_string()).join(name);
            fs::create_dir_all(&dir).at(&dir)?;
            for c in 0..spec.clips_per_keyword {
                let path = dir.join(format!("{c:03}.wav"));
                if path.exists() {
                    continue;
                }
                write_wav(&path, &render_clip(spec, &voice, k, c), SAMPLE_RATE)?;
                written += 1;
            }
        }
    }
    Ok(written)
}
