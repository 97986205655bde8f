#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace lmed {

inline double expit(double eta) {
    if (eta >= 0.0) {
        return 1.0 / (1.0 + std::exp(-eta));
    }
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + exp(x)) without overflow
inline double log1pexp(double x) {
    if (x > 35.0) return x;
    if (x < -35.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

// Compensated running sum (Neumaier's variant of Kahan summation).
class NeumaierSum {
public:
    void add(double v) {
        const double t = sum_ + v;
        comp_ += std::abs(sum_) >= std::abs(v) ? (sum_ - t) + v : (v - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

// Upper tail of chi-square with one degree of freedom.
inline double chisq1_upper(double w) {
    if (!(w > 0.0)) return 1.0;
    return std::erfc(std::sqrt(0.5 * w));
}

// Empirical quantile by linear interpolation of order statistics (type 7).
// `sorted` must be ascending and nonempty.
inline double quantile_sorted(std::span<const double> sorted, double q) {
    const std::size_t n = sorted.size();
    if (n == 0) throw std::invalid_argument("quantile of empty sample");
    if (n == 1 || q <= 0.0) return sorted.front();
    if (q >= 1.0) return sorted.back();
    const double h = (static_cast<double>(n) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const double frac = h - static_cast<double>(lo);
    if (lo + 1 >= n) return sorted[n - 1];
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile(std::span<const double> values, double q) {
    std::vector<double> s(values.begin(), values.end());
    std::sort(s.begin(), s.end());
    return quantile_sorted(s, q);
}

// Neumaier-compensated sum; order of accumulation is the input order.
inline double stable_sum(std::span<const double> values) {
    double sum = 0.0;
    double c = 0.0;
    for (double v : values) {
        const double t = sum + v;
        if (std::abs(sum) >= std::abs(v)) {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    return sum + c;
}

struct WeightStats {
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double mean = 0.0;
    double q3 = 0.0;
    double max = 0.0;
};

struct HistogramBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
};

/// Six-number summary in the order Min, 1st Qu., Median, Mean, 3rd Qu., Max.
inline WeightStats summarize(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("summary of empty sample");
    std::vector<double> s(values.begin(), values.end());
    std::sort(s.begin(), s.end());
    WeightStats out;
    out.min = s.front();
    out.max = s.back();
    out.q1 = quantile_sorted(s, 0.25);
    out.median = quantile_sorted(s, 0.5);
    out.q3 = quantile_sorted(s, 0.75);
    out.mean = stable_sum(values) / static_cast<double>(values.size());
    return out;
}

/// Equal-width histogram over [min, max]; the last bin is closed on the right.
inline std::vector<HistogramBin> histogram(std::span<const double> values, std::size_t bins) {
    if (values.empty() || bins == 0) return {};
    const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *mn_it;
    double hi = *mx_it;
    if (hi <= lo) {
        return {HistogramBin{lo, hi, values.size()}};
    }
    const double width = (hi - lo) / static_cast<double>(bins);
    std::vector<HistogramBin> out(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        out[b].lo = lo + width * static_cast<double>(b);
        out[b].hi = (b + 1 == bins) ? hi : lo + width * static_cast<double>(b + 1);
    }
    for (double v : values) {
        auto b = static_cast<std::size_t>((v - lo) / width);
        if (b >= bins) b = bins - 1;
        ++out[b].count;
    }
    return out;
}

// Running mean and covariance (Welford). Identical inputs leave the mean
// bit-identical to the input and the scatter exactly zero.
class RunningMoments {
public:
    explicit RunningMoments(Eigen::Index dim)
        : mean_(Eigen::VectorXd::Zero(dim)), scatter_(Eigen::MatrixXd::Zero(dim, dim)) {}

    void push(const Eigen::VectorXd& x) {
        ++count_;
        if (count_ == 1) {
            mean_ = x;
            return;
        }
        const Eigen::VectorXd delta = x - mean_;
        mean_ += delta / static_cast<double>(count_);
        const Eigen::VectorXd delta2 = x - mean_;
        scatter_ += delta * delta2.transpose();
    }

    std::size_t count() const { return count_; }
    const Eigen::VectorXd& mean() const { return mean_; }

    Eigen::MatrixXd covariance() const {
        Eigen::MatrixXd c = scatter_;
        if (count_ > 1) c /= static_cast<double>(count_ - 1);
        return 0.5 * (c + c.transpose());
    }

private:
    std::size_t count_ = 0;
    Eigen::VectorXd mean_;
    Eigen::MatrixXd scatter_;
};

class RunningMatrixMean {
public:
    RunningMatrixMean(Eigen::Index rows, Eigen::Index cols) : mean_(Eigen::MatrixXd::Zero(rows, cols)) {}

    void push(const Eigen::MatrixXd& x) {
        ++count_;
        if (count_ == 1) {
            mean_ = x;
            return;
        }
        mean_ += (x - mean_) / static_cast<double>(count_);
    }

    std::size_t count() const { return count_; }
    const Eigen::MatrixXd& mean() const { return mean_; }

private:
    std::size_t count_ = 0;
    Eigen::MatrixXd mean_;
};

} // namespace lmed
