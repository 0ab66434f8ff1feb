#pragma once

#include <complex>
#include <string>
#include <utility>
#include <vector>

#include "losatok/common.hpp"

namespace losatok::dsp {

// Canonical internal sample rate. Everything is resampled to this on ingestion.
constexpr int kSampleRate = 16000;

// Floor added inside log-mel so silence stays finite: log(power + kLogFloor).
constexpr double kLogFloor = 1e-5;

struct AudioBuffer {
    std::vector<double> samples; // mono, [-1, 1]
    int sample_rate = kSampleRate;

    double seconds() const { return samples.empty() ? 0.0 : double(samples.size()) / sample_rate; }
};

// Finite-valued samples, positive rate. Throws Errc::format otherwise.
void validate(const AudioBuffer& a);

// RIFF/WAVE reader: PCM 16-bit or IEEE float 32-bit, any channel count
// (averaged to mono). Distinct error codes: Errc::io (missing file),
// Errc::unsupported_codec, Errc::empty_audio.
AudioBuffer load_wav(const std::string& path);

// PCM 16-bit little-endian mono writer.
void save_wav(const std::string& path, const AudioBuffer& audio);

// Band-limited windowed-sinc resampler (Hann-windowed, half-width
// kResampleHalfWidth input samples, stretched on downsampling).
constexpr int kResampleHalfWidth = 16;
AudioBuffer resample(const AudioBuffer& audio, int target_rate);

struct StftFrames {
    int window_size = 0;
    int hop = 0;
    int frames = 0;
    int bins = 0;                   // window_size/2 + 1
    int original_samples = 0;       // length istft restores
    std::vector<double> window;     // periodic Hann
    std::vector<std::complex<double>> data; // frames x bins, row-major

    std::complex<double>& at(int frame, int bin) { return data[std::size_t(frame) * bins + bin]; }
    const std::complex<double>& at(int frame, int bin) const { return data[std::size_t(frame) * bins + bin]; }
};

struct MelFrames {
    int frames = 0;
    int mel_bins = 0;
    double frame_rate = 0.0; // Hz
    std::vector<double> values; // frames x mel_bins, log(mel power + kLogFloor)

    double& at(int frame, int bin) { return values[std::size_t(frame) * mel_bins + bin]; }
    double at(int frame, int bin) const { return values[std::size_t(frame) * mel_bins + bin]; }
};

std::vector<double> hann_periodic(int n);

// Numeric constant-overlap-add check for (window, hop): interior sum of
// shifted windows constant within 1e-6 relative.
bool cola_ok(const std::vector<double>& window, int hop);

// Center-padded (reflection) STFT, periodic Hann window.
// frames = floor(num_samples / hop) + 1. Preconditions: window_size a power
// of two, hop <= window_size, (window, hop) COLA.
StftFrames stft(const AudioBuffer& audio, int window_size, int hop);

// Least-squares inverse (windowed overlap-add, per-sample window-squared
// normalization). istft(stft(x)) == x to ~1e-12 on the interior.
AudioBuffer istft(const StftFrames& frames);

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filterbank spanning 0..Nyquist, stored sparse: per mel bin a
// list of (fft_bin, weight).
using SparseFilterbank = std::vector<std::vector<std::pair<int, double>>>;
SparseFilterbank mel_filterbank(int sample_rate, int n_fft, int mel_bins);

// Center frequencies (Hz) of the filters from mel_filterbank.
std::vector<double> mel_center_frequencies(int sample_rate, int mel_bins);

// log(fb @ |STFT|^2 + kLogFloor)
MelFrames mel_spectrogram(const AudioBuffer& audio, int window_size, int hop, int mel_bins);

// Reflection padding index (librosa-style, edge not repeated).
int reflect_index(int i, int n);

} // namespace losatok::dsp
