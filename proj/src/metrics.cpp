#include "volnet/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace volnet {

static void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty()) throw MetricsError("no samples to evaluate");
    if (scores.size() != labels.size()) {
        throw MetricsError("scores length " + std::to_string(scores.size()) +
                           " does not match labels length " + std::to_string(labels.size()));
    }
    for (int l : labels) {
        if (l != 0 && l != 1) throw MetricsError("labels must be 0 or 1, got " + std::to_string(l));
    }
}

Confusion confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                    double threshold) {
    check_inputs(scores, labels);
    Confusion c;
    for (size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        if (labels[i] == 1) {
            pred ? ++c.tp : ++c.fn;
        } else {
            pred ? ++c.fp : ++c.tn;
        }
    }
    return c;
}

Summary summarize(const Confusion& c) {
    if (c.total() == 0) throw MetricsError("empty confusion matrix");
    Summary s;
    s.acc = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    if (c.tp + c.fn > 0) s.sen = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (c.tn + c.fp > 0) s.spe = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    return s;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_inputs(scores, labels);
    const size_t n = scores.size();
    size_t pos = 0;
    for (int l : labels) pos += static_cast<size_t>(l);
    const size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
        throw SingleClassError("AUC needs at least one positive and one negative label");
    }

    // midranks of the scores, then the rank-sum statistic
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) rank_sum_pos += midrank;
        }
        i = j;
    }
    const double p = static_cast<double>(pos);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

EvalReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels,
                           double threshold) {
    EvalReport r;
    r.threshold = threshold;
    r.counts = confusion(scores, labels, threshold);
    r.summary = summarize(r.counts);
    r.auc = auc(scores, labels);
    return r;
}

static std::string pct(const std::optional<double>& v) {
    if (!v) return "    --";
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << std::setw(6) << (*v * 100.0);
    return os.str();
}

std::string format_report(const EvalReport& r) {
    std::ostringstream os;
    os << "   ACC    SEN    SPE    AUC\n";
    os << pct(r.summary.acc) << " " << pct(r.summary.sen) << " " << pct(r.summary.spe) << " "
       << pct(r.auc) << "\n";
    os << "tp=" << r.counts.tp << " fp=" << r.counts.fp << " tn=" << r.counts.tn
       << " fn=" << r.counts.fn << " threshold=" << r.threshold << "\n";
    return os.str();
}

std::string report_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "acc,sen,spe,auc,tp,fp,tn,fn,threshold\n";
    os << std::setprecision(10) << r.summary.acc << ",";
    if (r.summary.sen) os << *r.summary.sen;
    os << ",";
    if (r.summary.spe) os << *r.summary.spe;
    os << "," << r.auc << "," << r.counts.tp << "," << r.counts.fp << "," << r.counts.tn << ","
       << r.counts.fn << "," << r.threshold << "\n";
    return os.str();
}

}  // namespace volnet
