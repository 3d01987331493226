//! Synthetic three-syllable word corpus (b/d/g × a/i/u) and WAV I/O.

mod corpus;
mod synth;
mod wav;

pub use corpus::{
    extract_padded_syllable, generate_corpus, pad_center, seconds, split_corpus, Clip, Corpus, Split, CLIP_LEN,
    DEFAULT_CLIPS, MANIFEST, MANIFEST_HEADER, SYLLABLES_PER_CLIP,
};
pub use synth::{synthesize, synthesize_syllable, Consonant, Syllable, Vowel, F0_HZ, PEAK, SAMPLE_RATE};
pub use wav::{decode_wav, encode_wav, quantize, read_wav, write_wav};
