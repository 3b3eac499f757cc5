#ifndef VOLNET_METRICS_HPP
#define VOLNET_METRICS_HPP

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace volnet {

struct MetricsError : std::runtime_error {
    explicit MetricsError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SingleClassError : MetricsError {
    explicit SingleClassError(const std::string& msg) : MetricsError(msg) {}
};

struct Confusion {
    size_t tp = 0, fp = 0, tn = 0, fn = 0;
    size_t total() const { return tp + fp + tn + fn; }
};

// sen/spe are empty when their denominator is zero
struct Summary {
    double acc = 0;
    std::optional<double> sen;
    std::optional<double> spe;
};

struct EvalReport {
    Confusion counts;
    Summary summary;
    double auc = 0;
    double threshold = 0.5;
};

// predicted positive iff score >= threshold
Confusion confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                    double threshold = 0.5);

Summary summarize(const Confusion& c);

// Mann-Whitney rank form: P(score_pos > score_neg), ties counted 0.5
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

EvalReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels,
                           double threshold = 0.5);

// aligned table in Table-style column order ACC, SEN, SPE, AUC
std::string format_report(const EvalReport& r);
std::string report_csv(const EvalReport& r);

}  // namespace volnet

#endif
