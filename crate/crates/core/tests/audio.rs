use sounderfeit::audio::{read_raw_f32, read_wav, write_raw_f32, write_wav, AudioError};

fn tone() -> Vec<f64> {
    (0..4410).map(|i| 0.8 * (i as f64 * 0.05).sin()).collect()
}

fn as_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|s| *s as f32 as f64).collect()
}

#[test]
fn wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.wav");
    write_wav(&p, 44_100, &tone()).unwrap();
    let a = read_wav(&p).unwrap();
    assert_eq!(a.sample_rate, 44_100);
    assert_eq!(a.samples, as_f32(&tone()));
}

#[test]
fn raw_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.f32");
    write_raw_f32(&p, &tone()).unwrap();
    assert_eq!(read_raw_f32(&p).unwrap(), as_f32(&tone()));
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.pop();
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(read_raw_f32(&p), Err(AudioError::Unsupported(_))));
}

#[test]
fn pcm16_is_scaled_and_stereo_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pcm.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 22_050,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for v in [0i16, 16384, -32768, 32767] {
        w.write_sample(v).unwrap();
    }
    w.finalize().unwrap();
    assert_eq!(read_wav(&p).unwrap().samples, vec![0.0, 0.5, -1.0, 32767.0 / 32768.0]);

    let p = dir.path().join("st.wav");
    let mut w = hound::WavWriter::create(&p, hound::WavSpec { channels: 2, ..spec }).unwrap();
    w.write_sample(0i16).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    assert!(matches!(read_wav(&p), Err(AudioError::Unsupported(_))));
}
