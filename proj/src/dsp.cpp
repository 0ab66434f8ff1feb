#include "losatok/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "losatok/fft.hpp"

namespace losatok::dsp {

void validate(const AudioBuffer& a) {
    require(a.sample_rate > 0, Errc::format, "audio: sample_rate must be positive");
    for (double s : a.samples)
        require(std::isfinite(s), Errc::format, "audio: non-finite sample");
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint32_t read_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}
std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

} // namespace

AudioBuffer load_wav(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    require(f != nullptr, Errc::io, "wav: cannot open '" + path + "'");

    std::fseek(f.get(), 0, SEEK_END);
    long size = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    require(size >= 44, Errc::format, "wav: file too small: '" + path + "'");

    std::vector<unsigned char> buf(static_cast<std::size_t>(size));
    require(std::fread(buf.data(), 1, buf.size(), f.get()) == buf.size(), Errc::io,
            "wav: short read: '" + path + "'");

    require(std::memcmp(buf.data(), "RIFF", 4) == 0 && std::memcmp(buf.data() + 8, "WAVE", 4) == 0,
            Errc::format, "wav: not a RIFF/WAVE file: '" + path + "'");

    int fmt_code = -1, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;

    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const unsigned char* chunk = buf.data() + pos;
        std::uint32_t len = read_u32(chunk + 4);
        if (std::memcmp(chunk, "fmt ", 4) == 0 && len >= 16) {
            fmt_code = read_u16(chunk + 8);
            channels = read_u16(chunk + 10);
            sample_rate = read_u32(chunk + 12);
            bits = read_u16(chunk + 22);
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = chunk + 8;
            data_len = std::min<std::uint32_t>(len, std::uint32_t(buf.size() - pos - 8));
        }
        pos += 8 + len + (len & 1);
    }

    require(fmt_code >= 0 && data != nullptr, Errc::format, "wav: missing fmt/data chunk: '" + path + "'");
    require(channels >= 1 && sample_rate > 0, Errc::format, "wav: bad fmt chunk: '" + path + "'");

    const bool pcm16 = (fmt_code == 1 && bits == 16);
    const bool f32 = (fmt_code == 3 && bits == 32);
    require(pcm16 || f32, Errc::unsupported_codec,
            "wav: unsupported codec (need PCM16 or float32): '" + path + "'");

    const int bytes_per = bits / 8;
    const std::size_t stride = std::size_t(bytes_per) * channels;
    const std::size_t n_frames = data_len / stride;
    require(n_frames > 0, Errc::empty_audio, "wav: zero-length audio: '" + path + "'");

    AudioBuffer out;
    out.sample_rate = int(sample_rate);
    out.samples.resize(n_frames);
    for (std::size_t i = 0; i < n_frames; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
            const unsigned char* p = data + i * stride + std::size_t(c) * bytes_per;
            if (pcm16) {
                std::int16_t v = std::int16_t(read_u16(p));
                acc += double(v) / 32768.0;
            } else {
                float v;
                std::memcpy(&v, p, 4);
                acc += double(v);
            }
        }
        out.samples[i] = acc / channels;
    }
    validate(out);
    return out;
}

void save_wav(const std::string& path, const AudioBuffer& audio) {
    validate(audio);
    FilePtr f(std::fopen(path.c_str(), "wb"));
    require(f != nullptr, Errc::io, "wav: cannot write '" + path + "'");

    const std::uint32_t n = std::uint32_t(audio.samples.size());
    const std::uint32_t data_len = n * 2;
    const std::uint32_t riff_len = 36 + data_len;
    const std::uint32_t rate = std::uint32_t(audio.sample_rate);
    const std::uint32_t byte_rate = rate * 2;

    unsigned char h[44];
    std::memcpy(h, "RIFF", 4);
    std::memcpy(h + 8, "WAVEfmt ", 8);
    std::memcpy(h + 36, "data", 4);
    auto put32 = [&](int off, std::uint32_t v) {
        h[off] = v & 0xff;
        h[off + 1] = (v >> 8) & 0xff;
        h[off + 2] = (v >> 16) & 0xff;
        h[off + 3] = (v >> 24) & 0xff;
    };
    auto put16 = [&](int off, std::uint16_t v) {
        h[off] = v & 0xff;
        h[off + 1] = (v >> 8) & 0xff;
    };
    put32(4, riff_len);
    put32(16, 16);   // fmt chunk size
    put16(20, 1);    // PCM
    put16(22, 1);    // mono
    put32(24, rate);
    put32(28, byte_rate);
    put16(32, 2);    // block align
    put16(34, 16);   // bits
    put32(40, data_len);
    require(std::fwrite(h, 1, 44, f.get()) == 44, Errc::io, "wav: write failed: '" + path + "'");

    std::vector<unsigned char> pcm(data_len);
    for (std::uint32_t i = 0; i < n; ++i) {
        double v = std::clamp(audio.samples[i], -1.0, 1.0);
        auto q = std::int16_t(std::lround(v * 32767.0));
        pcm[2 * i] = std::uint16_t(q) & 0xff;
        pcm[2 * i + 1] = (std::uint16_t(q) >> 8) & 0xff;
    }
    require(std::fwrite(pcm.data(), 1, pcm.size(), f.get()) == pcm.size(), Errc::io,
            "wav: write failed: '" + path + "'");
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

AudioBuffer resample(const AudioBuffer& audio, int target_rate) {
    require(target_rate > 0, Errc::config, "resample: target_rate must be positive");
    validate(audio);
    if (audio.sample_rate == target_rate) return audio;

    const double ratio = double(target_rate) / audio.sample_rate;
    const auto n_in = std::int64_t(audio.samples.size());
    const auto n_out = std::int64_t(std::llround(n_in * ratio));

    // Downsampling stretches the kernel by 1/ratio to keep it band-limited.
    const double cutoff_scale = std::min(1.0, ratio);
    const double half_width = kResampleHalfWidth / cutoff_scale;

    AudioBuffer out;
    out.sample_rate = target_rate;
    out.samples.resize(std::size_t(n_out));
    for (std::int64_t m = 0; m < n_out; ++m) {
        const double center = m / ratio;
        const auto lo = std::int64_t(std::ceil(center - half_width));
        const auto hi = std::int64_t(std::floor(center + half_width));
        double acc = 0.0;
        for (std::int64_t k = std::max<std::int64_t>(lo, 0); k <= std::min(hi, n_in - 1); ++k) {
            const double t = (k - center) * cutoff_scale;
            double sinc = (std::abs(t) < 1e-12) ? 1.0 : std::sin(kPi * t) / (kPi * t);
            const double u = (k - center) / half_width; // [-1, 1]
            const double win = 0.5 + 0.5 * std::cos(kPi * u);
            acc += audio.samples[std::size_t(k)] * sinc * win * cutoff_scale;
        }
        out.samples[std::size_t(m)] = acc;
    }
    return out;
}

// ---------------------------------------------------------------------------
// STFT / ISTFT
// ---------------------------------------------------------------------------

std::vector<double> hann_periodic(int n) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) w[std::size_t(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
    return w;
}

bool cola_ok(const std::vector<double>& window, int hop) {
    const int n = int(window.size());
    if (hop <= 0 || hop > n) return false;
    // The least-squares inverse divides by the steady-state window-squared
    // envelope, so inversion is exact whenever that envelope stays bounded
    // away from zero over one interior hop period.
    const int span = 4 * n;
    std::vector<double> acc(std::size_t(span), 0.0);
    for (int start = -n; start < span; start += hop)
        for (int i = 0; i < n; ++i) {
            int p = start + i;
            if (p >= 0 && p < span)
                acc[std::size_t(p)] += window[std::size_t(i)] * window[std::size_t(i)];
        }
    double lo = 1e300, hi = -1e300;
    for (int p = n; p < n + hop; ++p) {
        lo = std::min(lo, acc[std::size_t(p)]);
        hi = std::max(hi, acc[std::size_t(p)]);
    }
    if (hi <= 0) return false;
    return lo / hi > 1e-3;
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

StftFrames stft(const AudioBuffer& audio, int window_size, int hop) {
    validate(audio);
    require(fftx::is_pow2(window_size), Errc::config, "stft: window_size must be a power of two");
    require(hop >= 1 && hop <= window_size, Errc::config, "stft: need 1 <= hop <= window_size");
    require(!audio.samples.empty(), Errc::empty_audio, "stft: empty audio");

    StftFrames out;
    out.window_size = window_size;
    out.hop = hop;
    out.bins = window_size / 2 + 1;
    out.original_samples = int(audio.samples.size());
    out.window = hann_periodic(window_size);
    require(cola_ok(out.window, hop), Errc::config, "stft: window/hop pair is not COLA");

    const int n = out.original_samples;
    const int pad = window_size / 2;
    out.frames = n / hop + 1;
    out.data.resize(std::size_t(out.frames) * out.bins);

    fftx::Rfft<double> plan(window_size);
    std::vector<double> frame(static_cast<std::size_t>(window_size));
    std::vector<double> re(static_cast<std::size_t>(out.bins)), im(std::size_t(out.bins));
    for (int t = 0; t < out.frames; ++t) {
        for (int i = 0; i < window_size; ++i) {
            int src = t * hop - pad + i;
            frame[std::size_t(i)] = audio.samples[std::size_t(reflect_index(src, n))] * out.window[std::size_t(i)];
        }
        plan.forward(frame.data(), re.data(), im.data());
        for (int k = 0; k < out.bins; ++k) out.at(t, k) = {re[std::size_t(k)], im[std::size_t(k)]};
    }
    return out;
}

AudioBuffer istft(const StftFrames& frames) {
    require(frames.window_size >= 2 && frames.hop >= 1 && frames.frames >= 1, Errc::format,
            "istft: malformed frames");
    require(cola_ok(frames.window, frames.hop), Errc::config, "istft: window/hop pair is not COLA");

    const int win = frames.window_size;
    const int hop = frames.hop;
    const int pad = win / 2;
    const int total = (frames.frames - 1) * hop + win;

    std::vector<double> acc(std::size_t(total), 0.0);
    std::vector<double> norm(std::size_t(total), 0.0);

    fftx::Rfft<double> plan(win);
    std::vector<double> re(static_cast<std::size_t>(frames.bins)), im(std::size_t(frames.bins));
    std::vector<double> time(static_cast<std::size_t>(win));
    for (int t = 0; t < frames.frames; ++t) {
        for (int k = 0; k < frames.bins; ++k) {
            re[std::size_t(k)] = frames.at(t, k).real();
            im[std::size_t(k)] = frames.at(t, k).imag();
        }
        plan.inverse(re.data(), im.data(), time.data());
        for (int i = 0; i < win; ++i) {
            const double w = frames.window[std::size_t(i)];
            acc[std::size_t(t * hop + i)] += time[std::size_t(i)] * w;
            norm[std::size_t(t * hop + i)] += w * w;
        }
    }

    AudioBuffer out;
    out.sample_rate = kSampleRate;
    const int n = frames.original_samples > 0 ? frames.original_samples : total - 2 * pad;
    out.samples.resize(std::size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
        const std::size_t p = std::size_t(i + pad);
        if (p < acc.size() && norm[p] > 1e-10) out.samples[std::size_t(i)] = acc[p] / norm[p];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mel
// ---------------------------------------------------------------------------

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_center_frequencies(int sample_rate, int mel_bins) {
    const double mel_max = hz_to_mel(sample_rate / 2.0);
    std::vector<double> centers(static_cast<std::size_t>(mel_bins));
    for (int m = 0; m < mel_bins; ++m)
        centers[std::size_t(m)] = mel_to_hz(mel_max * (m + 1) / (mel_bins + 1));
    return centers;
}

SparseFilterbank mel_filterbank(int sample_rate, int n_fft, int mel_bins) {
    require(mel_bins >= 1, Errc::config, "mel: mel_bins must be >= 1");
    const int bins = n_fft / 2 + 1;
    const double mel_max = hz_to_mel(sample_rate / 2.0);

    std::vector<double> edges(std::size_t(mel_bins) + 2);
    for (int m = 0; m < mel_bins + 2; ++m)
        edges[std::size_t(m)] = mel_to_hz(mel_max * m / (mel_bins + 1));

    SparseFilterbank fb(static_cast<std::size_t>(mel_bins));
    for (int m = 0; m < mel_bins; ++m) {
        const double lo = edges[std::size_t(m)], mid = edges[std::size_t(m) + 1], hi = edges[std::size_t(m) + 2];
        for (int k = 0; k < bins; ++k) {
            const double f = double(k) * sample_rate / n_fft;
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                w = (hi - f) / (hi - mid);
            else if (f == mid)
                w = 1.0;
            if (w > 0.0) fb[std::size_t(m)].emplace_back(k, w);
        }
        // Narrow filters at small FFT sizes can miss every bin center; pin
        // the nearest bin so each filter has support.
        if (fb[std::size_t(m)].empty()) {
            int k = int(std::lround(mid * n_fft / sample_rate));
            k = std::clamp(k, 0, bins - 1);
            fb[std::size_t(m)].emplace_back(k, 1.0);
        }
    }
    return fb;
}

MelFrames mel_spectrogram(const AudioBuffer& audio, int window_size, int hop, int mel_bins) {
    StftFrames sf = stft(audio, window_size, hop);
    const SparseFilterbank fb = mel_filterbank(audio.sample_rate, window_size, mel_bins);

    MelFrames out;
    out.frames = sf.frames;
    out.mel_bins = mel_bins;
    out.frame_rate = double(audio.sample_rate) / hop;
    out.values.resize(std::size_t(out.frames) * mel_bins);
    for (int t = 0; t < sf.frames; ++t) {
        for (int m = 0; m < mel_bins; ++m) {
            double acc = 0.0;
            for (const auto& [k, w] : fb[std::size_t(m)]) acc += w * std::norm(sf.at(t, k));
            out.at(t, m) = std::log(acc + kLogFloor);
        }
    }
    return out;
}

} // namespace losatok::dsp
