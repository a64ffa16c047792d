#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "fewshot/episodes.hpp"
#include "fewshot/rng.hpp"

// Ingestion: WAV decode/encode, log-mel spectrograms (Hann STFT, radix-2 FFT,
// HTK mel filterbank), manifest-driven dataset assembly, and the synthetic
// tone generator used for desk-scale experiments.

namespace fewshot {

struct Waveform {
    std::vector<double> samples; // mono, in [-1, 1]
    std::int64_t sample_rate = 0;
};

struct MelConfig {
    std::int64_t sample_rate = 44100;
    std::int64_t n_fft = 2048; // must be a power of two
    std::int64_t hop = 1024;
    std::int64_t n_mels = 64;
    double fmin = 0;
    double fmax = 22050;
    std::int64_t target_frames = 214;

    void validate() const {
        if (sample_rate < 1) throw ConfigError("sample_rate must be positive");
        if (n_fft < 2 || (n_fft & (n_fft - 1)) != 0)
            throw ConfigError("n_fft must be a power of two (radix-2 FFT), got " + std::to_string(n_fft));
        if (hop < 1) throw ConfigError("hop must be at least 1, got " + std::to_string(hop));
        if (n_mels < 1) throw ConfigError("n_mels must be at least 1, got " + std::to_string(n_mels));
        if (fmin < 0 || fmin >= fmax)
            throw ConfigError("need 0 <= fmin < fmax, got fmin=" + std::to_string(fmin) +
                              " fmax=" + std::to_string(fmax));
        if (fmax > static_cast<double>(sample_rate) / 2.0)
            throw ConfigError("fmax " + std::to_string(fmax) + " above Nyquist " +
                              std::to_string(sample_rate / 2));
        if (target_frames < 1) throw ConfigError("target_frames must be at least 1");
    }

    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xffu;
                h *= 0x100000001b3ULL;
            }
        };
        mix(1); // format version
        mix(static_cast<std::uint64_t>(sample_rate));
        mix(static_cast<std::uint64_t>(n_fft));
        mix(static_cast<std::uint64_t>(hop));
        mix(static_cast<std::uint64_t>(n_mels));
        mix(std::bit_cast<std::uint64_t>(fmin));
        mix(std::bit_cast<std::uint64_t>(fmax));
        mix(static_cast<std::uint64_t>(target_frames));
        return h;
    }
};

/// Named parameter sets: "esc50" (44.1 kHz, 5 s clips), "speech_commands"
/// (16 kHz, 1 s clips), "desk" (small synthetic-tone profile sized for CPU
/// experiments).
inline MelConfig mel_profile(const std::string& name) {
    MelConfig cfg;
    if (name == "esc50") {
        cfg = {44100, 2048, 1024, 64, 0, 22050, 214};
    } else if (name == "speech_commands") {
        cfg = {16000, 1024, 512, 64, 0, 8000, 30};
    } else if (name == "desk") {
        cfg = {8000, 256, 128, 16, 50, 4000, 16};
    } else {
        throw ConfigError("unknown mel profile: " + name +
                          " (expected esc50, speech_commands or desk)");
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32le(const std::vector<unsigned char>& b, std::size_t at) {
    return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
           (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

inline std::uint16_t read_u16le(const std::vector<unsigned char>& b, std::size_t at) {
    return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

inline bool tag_is(const std::vector<unsigned char>& b, std::size_t at, const char* tag) {
    return b[at] == static_cast<unsigned char>(tag[0]) && b[at + 1] == static_cast<unsigned char>(tag[1]) &&
           b[at + 2] == static_cast<unsigned char>(tag[2]) && b[at + 3] == static_cast<unsigned char>(tag[3]);
}

} // namespace detail

/// Decodes a RIFF/WAVE byte buffer: PCM, 16-bit, mono or stereo. Samples are
/// scaled by 1/32768; stereo frames average to mono.
inline Waveform load_wav_bytes(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 12) throw FormatError("offset 0: file too short for a RIFF/WAVE header");
    if (!detail::tag_is(bytes, 0, "RIFF")) throw FormatError("offset 0: expected RIFF magic");
    if (!detail::tag_is(bytes, 8, "WAVE")) throw FormatError("offset 8: expected WAVE form type");

    bool have_fmt = false;
    std::uint16_t channels = 0;
    std::uint32_t sample_rate = 0;
    std::size_t data_at = 0, data_size = 0;
    bool have_data = false;

    std::size_t at = 12;
    while (at < bytes.size()) {
        if (at + 8 > bytes.size())
            throw FormatError("offset " + std::to_string(at) + ": truncated chunk header");
        std::uint32_t size = detail::read_u32le(bytes, at + 4);
        if (at + 8 + size > bytes.size())
            throw FormatError("offset " + std::to_string(at) + ": chunk of " + std::to_string(size) +
                              " bytes overruns the file");
        if (detail::tag_is(bytes, at, "fmt ")) {
            if (size < 16) throw FormatError("offset " + std::to_string(at) + ": fmt chunk too small");
            std::uint16_t audio_format = detail::read_u16le(bytes, at + 8);
            channels = detail::read_u16le(bytes, at + 10);
            sample_rate = detail::read_u32le(bytes, at + 12);
            std::uint16_t bits = detail::read_u16le(bytes, at + 22);
            if (audio_format != 1)
                throw UnsupportedError("audio format " + std::to_string(audio_format) +
                                       " (only PCM is supported)");
            if (bits != 16)
                throw UnsupportedError(std::to_string(bits) + "-bit samples (only 16-bit is supported)");
            if (channels != 1 && channels != 2)
                throw UnsupportedError(std::to_string(channels) + " channels (only mono/stereo)");
            have_fmt = true;
        } else if (detail::tag_is(bytes, at, "data")) {
            data_at = at + 8;
            data_size = size;
            have_data = true;
        }
        at += 8 + size + (size & 1); // chunks are word-aligned
    }
    if (!have_fmt) throw FormatError("missing fmt chunk");
    if (!have_data) throw FormatError("missing data chunk");
    if (sample_rate == 0) throw FormatError("fmt chunk declares sample rate 0");
    std::size_t frame_bytes = 2u * channels;
    if (data_size % frame_bytes != 0)
        throw FormatError("data chunk size " + std::to_string(data_size) +
                          " is not a multiple of the frame size " + std::to_string(frame_bytes));
    std::size_t frames = data_size / frame_bytes;
    if (frames == 0) throw FormatError("data chunk holds no samples");

    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.reserve(frames);
    for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0;
        for (std::uint16_t c = 0; c < channels; ++c) {
            std::size_t p = data_at + f * frame_bytes + 2u * c;
            auto v = static_cast<std::int16_t>(detail::read_u16le(bytes, p));
            acc += static_cast<double>(v) / 32768.0;
        }
        w.samples.push_back(acc / channels);
    }
    return w;
}

inline Waveform load_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open wav file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return load_wav_bytes(bytes);
    } catch (const UnsupportedError& e) {
        throw UnsupportedError(path + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

/// Canonical 44-byte-header mono PCM-16 encoding; values clamp to [-1, 1]
/// and round to the nearest representable sample.
inline std::vector<unsigned char> wav_bytes(const std::vector<double>& samples, std::int64_t sample_rate) {
    if (samples.empty()) throw ContractError("wav_bytes: no samples");
    if (sample_rate < 1) throw ContractError("wav_bytes: bad sample rate");
    std::uint32_t data_size = static_cast<std::uint32_t>(samples.size() * 2);
    std::vector<unsigned char> b;
    b.reserve(44 + data_size);
    auto put_tag = [&b](const char* t) { b.insert(b.end(), t, t + 4); };
    auto put_u32 = [&b](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
    };
    auto put_u16 = [&b](std::uint16_t v) {
        b.push_back(static_cast<unsigned char>(v & 0xffu));
        b.push_back(static_cast<unsigned char>(v >> 8));
    };
    put_tag("RIFF");
    put_u32(36 + data_size);
    put_tag("WAVE");
    put_tag("fmt ");
    put_u32(16);
    put_u16(1); // PCM
    put_u16(1); // mono
    put_u32(static_cast<std::uint32_t>(sample_rate));
    put_u32(static_cast<std::uint32_t>(sample_rate * 2));
    put_u16(2);  // block align
    put_u16(16); // bits
    put_tag("data");
    put_u32(data_size);
    for (double x : samples) {
        double clamped = std::clamp(x, -1.0, 1.0);
        auto v = static_cast<std::int32_t>(std::lrint(clamped * 32768.0));
        v = std::clamp(v, -32768, 32767);
        put_u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    }
    return b;
}

inline void write_wav(const std::string& path, const std::vector<double>& samples,
                      std::int64_t sample_rate) {
    auto bytes = wav_bytes(samples, sample_rate);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError("cannot open wav file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Spectrograms
// ---------------------------------------------------------------------------

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

namespace detail {

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    std::size_t n = re.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j |= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1, ci = 0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                double ar = re[i + k], ai = im[i + k];
                double br = re[i + k + len / 2], bi = im[i + k + len / 2];
                double vr = br * cr - bi * ci;
                double vi = br * ci + bi * cr;
                re[i + k] = ar + vr;
                im[i + k] = ai + vi;
                re[i + k + len / 2] = ar - vr;
                im[i + k + len / 2] = ai - vi;
                double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

} // namespace detail

/// Periodic Hann window of length n.
inline std::vector<double> hann_window(std::int64_t n) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
        w[static_cast<std::size_t>(i)] =
            0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)));
    return w;
}

/// Triangular filters on the HTK mel scale, peak 1, rows over the n_fft/2+1
/// one-sided spectrum: [n_mels, n_fft/2 + 1] row-major.
inline std::vector<double> mel_filterbank(const MelConfig& cfg) {
    std::int64_t bins = cfg.n_fft / 2 + 1;
    double mlo = hz_to_mel(cfg.fmin), mhi = hz_to_mel(cfg.fmax);
    std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels + 2));
    for (std::int64_t k = 0; k < cfg.n_mels + 2; ++k)
        edges[static_cast<std::size_t>(k)] =
            mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(k) / static_cast<double>(cfg.n_mels + 1));
    std::vector<double> fb(static_cast<std::size_t>(cfg.n_mels * bins), 0.0);
    for (std::int64_t m = 0; m < cfg.n_mels; ++m) {
        double left = edges[static_cast<std::size_t>(m)];
        double center = edges[static_cast<std::size_t>(m + 1)];
        double right = edges[static_cast<std::size_t>(m + 2)];
        for (std::int64_t i = 0; i < bins; ++i) {
            double f = static_cast<double>(i) * static_cast<double>(cfg.sample_rate) /
                       static_cast<double>(cfg.n_fft);
            double w = 0;
            if (f > left && f <= center) w = (f - left) / (center - left);
            else if (f > center && f < right) w = (right - f) / (right - center);
            fb[static_cast<std::size_t>(m * bins + i)] = w;
        }
    }
    return fb;
}

/// Peak frequency of each mel filter (useful for constructing test tones).
inline std::vector<double> mel_centers(const MelConfig& cfg) {
    double mlo = hz_to_mel(cfg.fmin), mhi = hz_to_mel(cfg.fmax);
    std::vector<double> c(static_cast<std::size_t>(cfg.n_mels));
    for (std::int64_t m = 0; m < cfg.n_mels; ++m)
        c[static_cast<std::size_t>(m)] =
            mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(m + 1) / static_cast<double>(cfg.n_mels + 1));
    return c;
}

/// Pre-log mel energies [n_mels, target_frames]: Hann STFT magnitude squared
/// through the filterbank, then center-cropped or right-padded (with zero
/// energy) to target_frames.
template <typename Real>
std::vector<Real> mel_power(const Waveform& w, const MelConfig& cfg) {
    cfg.validate();
    if (w.sample_rate != cfg.sample_rate)
        throw FormatError("waveform sample rate " + std::to_string(w.sample_rate) +
                          " does not match config rate " + std::to_string(cfg.sample_rate));
    auto len = static_cast<std::int64_t>(w.samples.size());
    if (len < cfg.n_fft)
        throw IngestionError("waveform has " + std::to_string(len) + " samples, shorter than n_fft = " +
                             std::to_string(cfg.n_fft));
    std::int64_t avail = 1 + (len - cfg.n_fft) / cfg.hop;
    std::int64_t bins = cfg.n_fft / 2 + 1;
    auto window = hann_window(cfg.n_fft);
    auto fb = mel_filterbank(cfg);

    // frame -> column selection: crop the center or pad silence on the right
    std::int64_t start_frame = avail > cfg.target_frames ? (avail - cfg.target_frames) / 2 : 0;
    std::int64_t used = std::min(avail, cfg.target_frames);

    std::vector<Real> out(static_cast<std::size_t>(cfg.n_mels * cfg.target_frames), Real(0));
    std::vector<double> re(static_cast<std::size_t>(cfg.n_fft)), im(static_cast<std::size_t>(cfg.n_fft));
    for (std::int64_t t = 0; t < used; ++t) {
        std::int64_t s0 = (start_frame + t) * cfg.hop;
        for (std::int64_t i = 0; i < cfg.n_fft; ++i) {
            re[static_cast<std::size_t>(i)] =
                w.samples[static_cast<std::size_t>(s0 + i)] * window[static_cast<std::size_t>(i)];
            im[static_cast<std::size_t>(i)] = 0;
        }
        detail::fft_radix2(re, im);
        for (std::int64_t m = 0; m < cfg.n_mels; ++m) {
            double acc = 0;
            const double* row = fb.data() + m * bins;
            for (std::int64_t i = 0; i < bins; ++i) {
                double p = re[static_cast<std::size_t>(i)] * re[static_cast<std::size_t>(i)] +
                           im[static_cast<std::size_t>(i)] * im[static_cast<std::size_t>(i)];
                acc += row[i] * p;
            }
            out[static_cast<std::size_t>(m * cfg.target_frames + t)] = static_cast<Real>(acc);
        }
    }
    return out;
}

/// log(mel_power + 1e-10), shape [n_mels, target_frames].
template <typename Real>
std::vector<Real> log_mel(const Waveform& w, const MelConfig& cfg) {
    auto out = mel_power<Real>(w, cfg);
    for (auto& v : out) v = static_cast<Real>(std::log(static_cast<double>(v) + 1e-10));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

namespace detail {

inline std::string manifest_dir(const std::string& path) {
    auto slash = path.find_last_of('/');
    return slash == std::string::npos ? std::string() : path.substr(0, slash + 1);
}

inline std::string resolve_path(const std::string& base_dir, const std::string& p) {
    if (p.empty() || p.front() == '/' || base_dir.empty()) return p;
    return base_dir + p;
}

} // namespace detail

/// Reads a `path,class_label` manifest (with header) and extracts features
/// for every row, in manifest order. Relative paths resolve against the
/// manifest's directory. Labels map to class ids in order of first
/// appearance.
template <typename Real>
FewShotDataset<Real> build_dataset(const std::string& manifest_path, const MelConfig& cfg) {
    cfg.validate();
    std::ifstream in(manifest_path);
    if (!in) throw IngestionError("cannot open manifest: " + manifest_path);
    std::string base = detail::manifest_dir(manifest_path);

    FewShotDataset<Real> ds;
    ds.feature_shape = {1, cfg.n_mels, cfg.target_frames};
    std::map<std::string, std::int64_t> label_ids;

    std::string line;
    int line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            if (line != "path,class_label")
                throw FormatError(manifest_path + ":1: expected header \"path,class_label\", got \"" +
                                  line + "\"");
            saw_header = true;
            continue;
        }
        auto comma = line.find(',');
        if (comma == std::string::npos || comma == 0 || comma + 1 == line.size())
            throw FormatError(manifest_path + ":" + std::to_string(line_no) +
                              ": expected \"path,class_label\", got \"" + line + "\"");
        std::string path = detail::resolve_path(base, line.substr(0, comma));
        std::string label = line.substr(comma + 1);

        auto w = load_wav(path);
        if (w.sample_rate != cfg.sample_rate)
            throw FormatError(path + ": sample rate " + std::to_string(w.sample_rate) +
                              " does not match config rate " + std::to_string(cfg.sample_rate));
        auto [it, fresh] = label_ids.try_emplace(label, static_cast<std::int64_t>(ds.class_names.size()));
        if (fresh) ds.class_names.push_back(label);
        ds.add_sample(log_mel<Real>(w, cfg), it->second);
    }
    if (!saw_header) throw IngestionError("manifest is empty: " + manifest_path);
    if (ds.size() == 0) throw IngestionError("manifest has no data rows: " + manifest_path);
    return ds;
}

/// Synthetic benchmark: class c is a 0.5-amplitude sinusoid at a log-spaced
/// frequency (5% band margin inside [fmin, fmax]) plus white noise with RMS
/// noise_level, rendered to log-mel features. Clips are sized so the frame
/// count matches target_frames exactly.
template <typename Real>
FewShotDataset<Real> synth_tone_dataset(std::int64_t num_classes, std::int64_t per_class,
                                        const MelConfig& cfg, double noise_level,
                                        std::uint64_t rng_seed) {
    cfg.validate();
    if (num_classes < 2)
        throw ConfigError("synth_tone_dataset needs at least 2 classes, got " + std::to_string(num_classes));
    if (per_class < 1)
        throw ConfigError("synth_tone_dataset needs at least 1 sample per class, got " +
                          std::to_string(per_class));
    if (noise_level < 0)
        throw ConfigError("noise_level must be non-negative, got " + std::to_string(noise_level));

    double margin = 0.05 * (cfg.fmax - cfg.fmin);
    double lo = cfg.fmin + margin, hi = cfg.fmax - margin;
    std::int64_t len = cfg.n_fft + (cfg.target_frames - 1) * cfg.hop;

    FewShotDataset<Real> ds;
    ds.feature_shape = {1, cfg.n_mels, cfg.target_frames};
    for (std::int64_t c = 0; c < num_classes; ++c) {
        double f = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * static_cast<double>(c) /
                                               static_cast<double>(num_classes - 1));
        ds.class_names.push_back("tone_" + std::to_string(static_cast<long long>(std::llround(f))) + "hz");
        for (std::int64_t k = 0; k < per_class; ++k) {
            Rng rng(derive_seed(rng_seed, "synth-tone",
                                static_cast<std::uint64_t>(c * per_class + k)));
            // noise_level sets both the additive noise floor and the
            // per-sample pitch jitter, so tightly packed classes overlap the
            // way naturally varying tones would instead of forming
            // zero-variance templates.
            double f_sample = f;
            if (noise_level > 0) f_sample *= 1.0 + 0.5 * noise_level * rng.normal();
            f_sample = std::clamp(f_sample, 1.0, static_cast<double>(cfg.sample_rate) / 2.0);
            double step = 2.0 * std::numbers::pi * f_sample / static_cast<double>(cfg.sample_rate);
            Waveform w;
            w.sample_rate = cfg.sample_rate;
            w.samples.resize(static_cast<std::size_t>(len));
            for (std::int64_t i = 0; i < len; ++i) {
                double x = 0.5 * std::sin(step * static_cast<double>(i));
                if (noise_level > 0) x += noise_level * rng.normal();
                w.samples[static_cast<std::size_t>(i)] = std::clamp(x, -1.0, 1.0);
            }
            ds.add_sample(log_mel<Real>(w, cfg), c);
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Feature standardization
// ---------------------------------------------------------------------------

struct Standardizer {
    double mean = 0;
    double std = 1;
};

/// Global mean/std over every feature value of the listed classes (the
/// training split). Degenerate spreads fall back to std = 1.
template <typename Real>
Standardizer fit_standardizer(const FewShotDataset<Real>& ds, const std::vector<std::int64_t>& class_ids) {
    if (class_ids.empty()) throw ContractError("fit_standardizer: empty class list");
    double sum = 0, count = 0;
    for (auto cls : class_ids) {
        auto it = ds.class_index.find(cls);
        if (it == ds.class_index.end())
            throw ContractError("fit_standardizer: class " + std::to_string(cls) + " not in dataset");
        for (auto idx : it->second)
            for (auto v : ds.features[static_cast<std::size_t>(idx)]) {
                sum += static_cast<double>(v);
                count += 1;
            }
    }
    Standardizer s;
    s.mean = sum / count;
    double ss = 0;
    for (auto cls : class_ids)
        for (auto idx : ds.class_index.at(cls))
            for (auto v : ds.features[static_cast<std::size_t>(idx)]) {
                double d = static_cast<double>(v) - s.mean;
                ss += d * d;
            }
    s.std = std::sqrt(ss / count);
    if (s.std < 1e-12) s.std = 1;
    return s;
}

/// (x - mean) / std over every sample in place.
template <typename Real>
void standardize(FewShotDataset<Real>& ds, const Standardizer& s) {
    for (auto& f : ds.features)
        for (auto& v : f)
            v = static_cast<Real>((static_cast<double>(v) - s.mean) / s.std);
}

} // namespace fewshot
