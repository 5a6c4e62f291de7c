//! On-disk corpus layout: one directory per song holding `mixture.wav` and
//! one `<source>.wav` per source, described by a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::synth::{synth_dataset, SynthSpec};
use crate::wav::{read_wav, write_wav};

pub const MIXTURE_FILE: &str = "mixture.wav";
pub const TEST_FRACTION: f64 = 0.15;
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SongEntry {
    pub name: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Source names in model output order.
    pub sources: Vec<String>,
    pub songs: Vec<SongEntry>,
}

/// A song loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Song {
    pub name: String,
    pub mixture: AudioClip,
    pub sources: Vec<AudioClip>,
}

/// Split sizes `(train, validation, test)` for `n` songs.
///
/// The test set takes 15% (at least one song); validation takes the last 10%
/// of what remains (at least one song when two or more remain).
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    if n == 0 {
        return (0, 0, 0);
    }
    let test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n);
    let rest = n - test;
    let val = if rest >= 2 {
        ((rest as f64 * VAL_FRACTION).ceil() as usize).max(1)
    } else {
        0
    };
    (rest - val, val, test)
}

impl Manifest {
    /// Assigns splits in song order: train first, then validation, then test.
    pub fn with_default_split(sources: Vec<String>, names: Vec<String>) -> Manifest {
        let (train, val, _) = split_counts(names.len());
        let songs = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| SongEntry {
                name,
                split: if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Validation
                } else {
                    Split::Test
                },
            })
            .collect();
        Manifest { sources, songs }
    }

    pub fn songs_in(&self, split: Split) -> impl Iterator<Item = &SongEntry> {
        self.songs.iter().filter(move |s| s.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::config("manifest lists no sources"));
        }
        if self.sources.iter().any(|s| s == "mixture") {
            return Err(Error::config("source name 'mixture' is reserved"));
        }
        let mut names: Vec<&str> = self.songs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("manifest lists a song twice"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads one song directory (sibling of the manifest file).
    pub fn load_song(&self, root: &Path, name: &str) -> Result<Song> {
        let dir = root.join(name);
        let mixture = read_wav(dir.join(MIXTURE_FILE))?;
        let mut sources = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            let clip = read_wav(dir.join(format!("{s}.wav")))?;
            mixture
                .ensure_same_layout(&clip, &format!("song {name}, source {s}"))?;
            sources.push(clip);
        }
        Ok(Song {
            name: name.to_string(),
            mixture,
            sources,
        })
    }
}

/// Directory holding the manifest; song folders live next to it.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn write_song(dir: &Path, source_names: &[String], mixture: &AudioClip, sources: &[AudioClip]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_wav(mixture, dir.join(MIXTURE_FILE))?;
    for (name, clip) in source_names.iter().zip(sources) {
        write_wav(clip, dir.join(format!("{name}.wav")))?;
    }
    Ok(())
}

/// Renders `songs` synthetic songs under `out_dir` and writes `manifest.json`.
/// Song `i` uses seed `spec.seed * 1000 + i`.
pub fn write_synthetic_corpus(spec: &SynthSpec, songs: usize, out_dir: &Path) -> Result<Manifest> {
    if songs == 0 {
        return Err(Error::config("corpus needs at least one song"));
    }
    let names: Vec<String> = spec.sources.iter().map(|s| s.name.clone()).collect();
    let song_names: Vec<String> = (0..songs).map(|i| format!("song{i:03}")).collect();
    let manifest = Manifest::with_default_split(names.clone(), song_names.clone());
    manifest.validate()?;
    for (i, song) in song_names.iter().enumerate() {
        let song_spec = SynthSpec {
            seed: spec.seed.wrapping_mul(1000).wrapping_add(i as u64),
            ..spec.clone()
        };
        let (mix, srcs) = synth_dataset(&song_spec)?;
        write_song(&out_dir.join(song), &names, &mix, &srcs)?;
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
