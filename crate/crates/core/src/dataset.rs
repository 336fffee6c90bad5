//! Dataset recording, storage and loading, plus CSV run logs.
//!
//! Dataset file layout, little-endian throughout:
//!
//! ```text
//! magic      "SASD"
//! version    u32
//! count      u64
//! channels   u32, height u32, width u32
//! seed       u64
//! meta_len   u32, then meta_len bytes of UTF-8 metadata
//! samples    count x { pixels u8[c*h*w], alpha f32, beta f32, t f64 }
//! crc32      u32 over every preceding byte
//! ```
//!
//! Pixels are stored quantized to u8 and normalized to [-1, 1] on access.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{CHANNELS, FRAME_HEIGHT, FRAME_WIDTH, STACK_LEN};
use crate::net::TrainingSet;
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SASD";
pub const DATASET_VERSION: u32 = 1;
const LABEL_BYTES: usize = 4 + 4 + 8;
const RECORD_LEN: usize = STACK_LEN + LABEL_BYTES;
/// Labels must stay inside this magnitude, degrees.
pub const LABEL_LIMIT: f32 = 45.0;

/// u8 -> [-1, 1].
pub fn normalize_pixel(p: u8) -> f32 {
    f32::from(p) / 127.5 - 1.0
}

/// [-1, 1] -> u8, rounding to nearest.
pub fn quantize_pixel(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn normalize_table() -> [f64; 256] {
    let mut t = [0.0; 256];
    for (i, v) in t.iter_mut().enumerate() {
        *v = f64::from(normalize_pixel(i as u8));
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub count: u64,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub seed: u64,
    pub metadata: String,
}

impl DatasetHeader {
    pub fn new(count: u64, seed: u64, metadata: impl Into<String>) -> Self {
        Self {
            count,
            channels: CHANNELS as u32,
            height: FRAME_HEIGHT as u32,
            width: FRAME_WIDTH as u32,
            seed,
            metadata: metadata.into(),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(40 + self.metadata.len());
        b.extend_from_slice(DATASET_MAGIC);
        b.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        b.extend_from_slice(&self.count.to_le_bytes());
        for d in [self.channels, self.height, self.width] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        b.extend_from_slice(self.metadata.as_bytes());
        b
    }
}

/// One recorded sample with quantized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<u8>,
    pub label: [f32; 2],
    pub t: f64,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != STACK_LEN {
            return Err(Error::dimension(STACK_LEN, self.pixels.len()));
        }
        if !self.label.iter().all(|l| l.is_finite() && l.abs() <= LABEL_LIMIT) {
            return Err(Error::Domain(format!("label {:?} outside +-{LABEL_LIMIT} deg", self.label)));
        }
        Ok(())
    }
}

/// Streaming writer; the sample count is fixed up front.
pub struct DatasetWriter {
    out: BufWriter<File>,
    hasher: crc32fast::Hasher,
    expected: u64,
    written: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, header: &DatasetHeader) -> Result<Self> {
        if (header.channels, header.height, header.width) != (CHANNELS as u32, FRAME_HEIGHT as u32, FRAME_WIDTH as u32) {
            return Err(Error::dimension(
                format!("{CHANNELS}x{FRAME_HEIGHT}x{FRAME_WIDTH}"),
                format!("{}x{}x{}", header.channels, header.height, header.width),
            ));
        }
        let mut w = Self {
            out: BufWriter::with_capacity(1 << 20, File::create(path)?),
            hasher: crc32fast::Hasher::new(),
            expected: header.count,
            written: 0,
        };
        w.put(&header.encode())?;
        Ok(w)
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.hasher.update(bytes);
        self.out.write_all(bytes)?;
        Ok(())
    }

    pub fn write_sample(&mut self, sample: &Sample) -> Result<()> {
        sample.validate()?;
        if self.written == self.expected {
            return Err(Error::Config(format!("header announced {} samples", self.expected)));
        }
        self.put(&sample.pixels)?;
        let mut tail = [0u8; LABEL_BYTES];
        tail[0..4].copy_from_slice(&sample.label[0].to_le_bytes());
        tail[4..8].copy_from_slice(&sample.label[1].to_le_bytes());
        tail[8..16].copy_from_slice(&sample.t.to_le_bytes());
        self.put(&tail)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.expected {
            return Err(Error::Config(format!(
                "wrote {} samples, header announced {}",
                self.written, self.expected
            )));
        }
        let crc = self.hasher.clone().finalize();
        self.out.write_all(&crc.to_le_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Writes a complete dataset in one call.
pub fn save(path: impl AsRef<Path>, seed: u64, metadata: &str, samples: &[Sample]) -> Result<()> {
    let header = DatasetHeader::new(samples.len() as u64, seed, metadata);
    let mut w = DatasetWriter::create(path, &header)?;
    for s in samples {
        w.write_sample(s)?;
    }
    w.finish()
}

/// A loaded dataset. Sample bytes stay in the file image and are decoded on
/// access.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    bytes: Vec<u8>,
    data_start: usize,
    lut: [f64; 256],
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::format(offset as u64, msg)
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let need = |at: usize, n: usize, what: &str| -> Result<()> {
            if bytes.len() < at + n {
                Err(format_err(at, format!("truncated while reading {what}")))
            } else {
                Ok(())
            }
        };
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        need(0, 4, "magic")?;
        if &bytes[0..4] != DATASET_MAGIC {
            return Err(format_err(0, format!(
                "bad magic {:?}, expected \"SASD\"",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        need(4, 4, "version")?;
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(format_err(4, format!("unsupported dataset version {version}, expected {DATASET_VERSION}")));
        }
        need(8, 8 + 12 + 8 + 4, "header")?;
        let count = u64_at(8);
        let (channels, height, width) = (u32_at(16), u32_at(20), u32_at(24));
        if (channels, height, width) != (CHANNELS as u32, FRAME_HEIGHT as u32, FRAME_WIDTH as u32) {
            return Err(format_err(16, format!(
                "frame dims {channels}x{height}x{width}, expected {CHANNELS}x{FRAME_HEIGHT}x{FRAME_WIDTH}"
            )));
        }
        let seed = u64_at(28);
        let meta_len = u32_at(36) as usize;
        need(40, meta_len, "metadata")?;
        let metadata = std::str::from_utf8(&bytes[40..40 + meta_len])
            .map_err(|e| format_err(40 + e.valid_up_to(), "metadata is not UTF-8"))?
            .to_owned();
        let data_start = 40 + meta_len;
        let body = (count as usize)
            .checked_mul(RECORD_LEN)
            .ok_or_else(|| format_err(8, "sample count overflows"))?;
        let crc_at = data_start + body;
        if bytes.len() < crc_at + 4 {
            let complete = (bytes.len().saturating_sub(data_start)) / RECORD_LEN;
            return Err(format_err(
                data_start + complete * RECORD_LEN,
                format!("truncated: header announces {count} samples, file holds {complete} complete"),
            ));
        }
        if bytes.len() > crc_at + 4 {
            return Err(format_err(crc_at + 4, "trailing bytes after crc"));
        }
        let stored = u32_at(crc_at);
        let computed = crc32fast::hash(&bytes[..crc_at]);
        if stored != computed {
            return Err(format_err(crc_at, format!("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")));
        }
        let ds = Self {
            header: DatasetHeader {
                count,
                channels,
                height,
                width,
                seed,
                metadata,
            },
            bytes,
            data_start,
            lut: normalize_table(),
        };
        for i in 0..ds.len() {
            let l = ds.label(i);
            if !l.iter().all(|v| v.is_finite() && v.abs() <= LABEL_LIMIT) {
                return Err(format_err(ds.record_start(i) + STACK_LEN, format!("label {l:?} out of range")));
            }
        }
        Ok(ds)
    }

    fn record_start(&self, i: usize) -> usize {
        self.data_start + i * RECORD_LEN
    }

    pub fn len(&self) -> usize {
        self.header.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let s = self.record_start(i);
        &self.bytes[s..s + STACK_LEN]
    }

    pub fn label(&self, i: usize) -> [f32; 2] {
        let s = self.record_start(i) + STACK_LEN;
        let f = |o: usize| f32::from_le_bytes(self.bytes[s + o..s + o + 4].try_into().unwrap());
        [f(0), f(4)]
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        let s = self.record_start(i) + STACK_LEN + 8;
        f64::from_le_bytes(self.bytes[s..s + 8].try_into().unwrap())
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            pixels: self.pixels(i).to_vec(),
            label: self.label(i),
            t: self.timestamp(i),
        }
    }

    /// Normalized frames of sample `i`.
    pub fn normalized(&self, i: usize) -> Vec<f32> {
        self.pixels(i).iter().map(|&p| normalize_pixel(p)).collect()
    }

    pub fn all(&self) -> Subset<'_> {
        Subset {
            data: self,
            indices: (0..self.len()).collect(),
        }
    }
}

impl TrainingSet for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn fill_input(&self, i: usize, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(self.pixels(i)) {
            *o = self.lut[p as usize];
        }
    }

    fn target(&self, i: usize) -> [f64; 2] {
        let l = self.label(i);
        [f64::from(l[0]), f64::from(l[1])]
    }
}

/// A selection of samples from a dataset.
#[derive(Debug, Clone)]
pub struct Subset<'a> {
    pub data: &'a Dataset,
    pub indices: Vec<usize>,
}

impl TrainingSet for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn fill_input(&self, i: usize, out: &mut [f64]) {
        self.data.fill_input(self.indices[i], out)
    }

    fn target(&self, i: usize) -> [f64; 2] {
        self.data.target(self.indices[i])
    }
}

/// Seeded random partition into (train, validation).
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Subset<'_>, Subset<'_>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (data.len() as f64 * train_fraction).round() as usize;
    let val = idx.split_off(n_train);
    Ok((
        Subset { data, indices: idx },
        Subset { data, indices: val },
    ))
}

/// One telemetry row of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub time: f64,
    pub alpha_gt: f64,
    pub beta_gt: f64,
    pub alpha_pred: f64,
    pub beta_pred: f64,
    pub alpha_sp: f64,
    pub beta_sp: f64,
    pub pressures: [f64; 3],
    pub u_alpha: f64,
    pub u_beta: f64,
}

pub const LOG_HEADER: &str = "time,alpha_gt,beta_gt,alpha_pred,beta_pred,alpha_sp,beta_sp,p_A,p_B,p_C,u_alpha,u_beta";

/// Per-axis and combined RMSE of predictions against ground truth, degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rmse {
    pub alpha: f64,
    pub beta: f64,
    pub combined: f64,
}

impl Rmse {
    pub fn from_pairs(pairs: impl IntoIterator<Item = ([f64; 2], [f64; 2])>) -> Option<Self> {
        let (mut sa, mut sb, mut n) = (0.0, 0.0, 0usize);
        for (pred, truth) in pairs {
            sa += (pred[0] - truth[0]).powi(2);
            sb += (pred[1] - truth[1]).powi(2);
            n += 1;
        }
        (n > 0).then(|| {
            let n = n as f64;
            Rmse {
                alpha: (sa / n).sqrt(),
                beta: (sb / n).sqrt(),
                combined: ((sa + sb) / (2.0 * n)).sqrt(),
            }
        })
    }

    pub fn prediction(rows: &[LogRow]) -> Option<Self> {
        Self::from_pairs(
            rows.iter()
                .map(|r| ([r.alpha_pred, r.beta_pred], [r.alpha_gt, r.beta_gt])),
        )
    }

    pub fn tracking(rows: &[LogRow]) -> Option<Self> {
        Self::from_pairs(
            rows.iter()
                .map(|r| ([r.alpha_gt, r.beta_gt], [r.alpha_sp, r.beta_sp])),
        )
    }
}

/// Renders a run log as CSV. Non-empty logs end with a comment row holding
/// the prediction RMSE.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::with_capacity(64 + rows.len() * 160);
    s.push_str(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let v = [
            r.time, r.alpha_gt, r.beta_gt, r.alpha_pred, r.beta_pred, r.alpha_sp, r.beta_sp,
            r.pressures[0], r.pressures[1], r.pressures[2], r.u_alpha, r.u_beta,
        ];
        let line: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    if let Some(rmse) = Rmse::prediction(rows) {
        s.push_str(&format!(
            "# rmse_alpha_deg={},rmse_beta_deg={},rmse_combined_deg={}\n",
            rmse.alpha, rmse.beta, rmse.combined
        ));
    }
    s
}

pub fn export_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, log_to_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize) -> Sample {
        Sample {
            pixels: (0..STACK_LEN).map(|k| ((k + i * 31) % 256) as u8).collect(),
            label: [i as f32 * 0.37 - 10.0, 20.0 - i as f32 * 0.11],
            t: i as f64 * 0.1,
        }
    }

    #[test]
    fn pixel_endpoints() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert!((normalize_pixel(128) - 0.003_921_569).abs() < 1e-7);
    }

    #[test]
    fn quantize_inverts_normalize() {
        for p in 0..=255u8 {
            assert_eq!(quantize_pixel(normalize_pixel(p)), p);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sasd");
        let samples: Vec<Sample> = (0..5).map(sample).collect();
        save(&path, 77, "{\"k\":1}", &samples).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.header.seed, 77);
        assert_eq!(ds.header.metadata, "{\"k\":1}");
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(&ds.sample(i), s);
            assert_eq!(ds.label(i)[0].to_bits(), s.label[0].to_bits());
        }
        let mut buf = vec![0.0; STACK_LEN];
        ds.fill_input(2, &mut buf);
        assert_eq!(buf[0], f64::from(normalize_pixel(samples[2].pixels[0])));
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sasd");
        save(&path, 1, "", &[sample(0), sample(1)]).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[1] = b'X';
        let err = Dataset::from_bytes(bad).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(err.to_string().contains("SASD"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(bad), Err(Error::Format { offset: 4, .. })));

        let cut = bytes[..bytes.len() - 100].to_vec();
        assert!(matches!(Dataset::from_bytes(cut), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[100] ^= 1;
        match Dataset::from_bytes(bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn writer_rejects_bad_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sasd");
        let mut s = sample(0);
        s.label[0] = 50.0;
        assert!(save(&path, 0, "", &[s]).is_err());
        let mut w = DatasetWriter::create(&path, &DatasetHeader::new(2, 0, "")).unwrap();
        w.write_sample(&sample(0)).unwrap();
        assert!(w.finish().is_err());
    }

    fn dataset(n: usize) -> Dataset {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sasd");
        let samples: Vec<Sample> = (0..n).map(sample).collect();
        save(&path, 0, "", &samples).unwrap();
        Dataset::load(&path).unwrap()
    }

    #[test]
    fn split_is_seeded_partition() {
        let ds = dataset(100);
        let (a, b) = split(&ds, 0.8, 5).unwrap();
        assert_eq!((a.indices.len(), b.indices.len()), (80, 20));
        let (a2, b2) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(a.indices, a2.indices);
        assert_eq!(b.indices, b2.indices);
        let mut all: Vec<usize> = a.indices.iter().chain(&b.indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(matches!(split(&dataset(0), 0.5, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn split_partitions_various_sizes() {
        for n in [1, 2, 7, 33] {
            let ds = dataset(n);
            for f in [0.1, 0.5, 0.9] {
                let (a, b) = split(&ds, f, n as u64).unwrap();
                let mut all: Vec<usize> = a.indices.iter().chain(&b.indices).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    fn row(t: f64, gt: [f64; 2], pred: [f64; 2]) -> LogRow {
        LogRow {
            time: t,
            alpha_gt: gt[0],
            beta_gt: gt[1],
            alpha_pred: pred[0],
            beta_pred: pred[1],
            alpha_sp: 0.0,
            beta_sp: 0.0,
            pressures: [1.0; 3],
            u_alpha: 0.0,
            u_beta: 0.0,
        }
    }

    #[test]
    fn csv_header_only_when_empty() {
        assert_eq!(log_to_csv(&[]), format!("{LOG_HEADER}\n"));
    }

    #[test]
    fn rmse_definitions() {
        let same: Vec<LogRow> = (0..10).map(|i| row(i as f64, [i as f64, -1.0], [i as f64, -1.0])).collect();
        assert_eq!(Rmse::prediction(&same).unwrap().combined, 0.0);
        let offset: Vec<LogRow> = (0..10).map(|i| row(i as f64, [i as f64, 2.0], [i as f64 + 1.0, 3.0])).collect();
        let r = Rmse::prediction(&offset).unwrap();
        assert!((r.alpha - 1.0).abs() < 1e-12 && (r.beta - 1.0).abs() < 1e-12 && (r.combined - 1.0).abs() < 1e-12);
        let csv = log_to_csv(&offset);
        assert!(csv.lines().last().unwrap().starts_with("# rmse_alpha_deg=1"));
        assert_eq!(csv.lines().count(), 12);
    }
}
