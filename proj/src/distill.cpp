// SPDX-License-Identifier: Apache-2.0
#include "dart/distill.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dart/parallel.hpp"
#include "dart/rng.hpp"
#include "json.hpp"

namespace dart {

namespace {

/// Row-major dense matrix scratch for the solver.
struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

/// Sufficient statistics of one level over the image batch, with the bias
/// folded in as a trailing column of ones: G = A^T A, C = A^T Y, yy = ||Y||^2.
struct LevelStats {
    std::size_t s = 0, t = 0, rows = 0, images = 0;
    Mat gram, cross;
    double yy = 0.0;
};

void check_pairs(const std::vector<FpnFeatures>& student, const std::vector<FpnFeatures>& teacher) {
    if (student.empty()) throw std::invalid_argument("distillation needs at least one image");
    if (student.size() != teacher.size()) {
        throw DimensionError("student has " + std::to_string(student.size()) + " feature sets, teacher " +
                             std::to_string(teacher.size()));
    }
    for (std::size_t i = 0; i < student.size(); ++i) {
        for (std::size_t l = 0; l < 3; ++l) {
            const Tensor& x = student[i].levels[l];
            const Tensor& y = teacher[i].levels[l];
            if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0)) {
                throw DimensionError("FPN level " + std::to_string(l) + " extents differ: student " +
                                     shape_str(x.shape()) + ", teacher " + shape_str(y.shape()));
            }
            const auto& ref = student[0].levels[l];
            if (x.dim(1) != ref.dim(1) || y.dim(1) != teacher[0].levels[l].dim(1)) {
                throw DimensionError("FPN level " + std::to_string(l) + " width varies across images");
            }
        }
    }
}

LevelStats level_stats(const std::vector<FpnFeatures>& student, const std::vector<FpnFeatures>& teacher,
                       std::size_t l) {
    LevelStats st;
    st.s = student[0].levels[l].dim(1);
    st.t = teacher[0].levels[l].dim(1);
    st.images = student.size();
    const std::size_t a = st.s + 1;
    st.gram = Mat(a, a);
    st.cross = Mat(a, st.t);
    std::vector<double> row(a);
    for (std::size_t i = 0; i < student.size(); ++i) {
        const auto x = student[i].levels[l].data();
        const auto y = teacher[i].levels[l].data();
        const std::size_t n = student[i].levels[l].dim(0);
        st.rows += n;
        for (std::size_t r = 0; r < n; ++r) {
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r * st.s), st.s, row.begin());
            row[st.s] = 1.0;
            for (std::size_t p = 0; p < a; ++p) {
                for (std::size_t q = 0; q < a; ++q) st.gram(p, q) += row[p] * row[q];
                for (std::size_t c = 0; c < st.t; ++c) st.cross(p, c) += row[p] * y[r * st.t + c];
            }
            for (std::size_t c = 0; c < st.t; ++c) st.yy += y[r * st.t + c] * y[r * st.t + c];
        }
    }
    return st;
}

/// theta = [W; b], (s+1) x t.
LevelAdapter from_theta(const Mat& theta, std::size_t s, std::size_t t) {
    std::vector<double> w(theta.v.begin(), theta.v.begin() + static_cast<std::ptrdiff_t>(s * t));
    std::vector<double> b(theta.v.begin() + static_cast<std::ptrdiff_t>(s * t), theta.v.end());
    return {Tensor({s, t}, std::move(w)), Tensor({t}, std::move(b))};
}

/// Objective in Gram form: (1/M) ||A theta - Y||^2 + lambda ||W||^2.
double objective(const LevelStats& st, const Mat& theta, double lambda) {
    const std::size_t a = st.s + 1;
    double quad = 0.0, lin = 0.0, ridge = 0.0;
    for (std::size_t c = 0; c < st.t; ++c) {
        for (std::size_t p = 0; p < a; ++p) {
            double gp = 0.0;
            for (std::size_t q = 0; q < a; ++q) gp += st.gram(p, q) * theta(q, c);
            quad += theta(p, c) * gp;
            lin += theta(p, c) * st.cross(p, c);
            if (p < st.s) ridge += theta(p, c) * theta(p, c);
        }
    }
    return (quad - 2.0 * lin + st.yy) / static_cast<double>(st.images) + lambda * ridge;
}

/// In-place Cholesky of a symmetric positive definite matrix. Returns false
/// when a pivot is not safely positive relative to the diagonal scale.
bool cholesky(Mat& m) {
    const std::size_t n = m.rows;
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(m(i, i)));
    const double tol = scale * 1e-13;
    for (std::size_t j = 0; j < n; ++j) {
        double d = m(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= m(j, k) * m(j, k);
        if (!(d > tol)) return false;
        const double ljj = std::sqrt(d);
        m(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = m(i, j);
            for (std::size_t k = 0; k < j; ++k) v -= m(i, k) * m(j, k);
            m(i, j) = v / ljj;
        }
    }
    return true;
}

/// Solves L L^T x = rhs for every column of rhs.
Mat cholesky_solve(const Mat& chol, const Mat& rhs) {
    const std::size_t n = chol.rows;
    Mat x = rhs;
    for (std::size_t c = 0; c < rhs.cols; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double v = x(i, c);
            for (std::size_t k = 0; k < i; ++k) v -= chol(i, k) * x(k, c);
            x(i, c) = v / chol(i, i);
        }
        for (std::size_t i = n; i-- > 0;) {
            double v = x(i, c);
            for (std::size_t k = i + 1; k < n; ++k) v -= chol(k, i) * x(k, c);
            x(i, c) = v / chol(i, i);
        }
    }
    return x;
}

/// H = (2/M) G + 2 lambda D, D masking the bias row.
Mat hessian(const LevelStats& st, double lambda) {
    Mat h = st.gram;
    const double m = static_cast<double>(st.images);
    for (auto& v : h.v) v *= 2.0 / m;
    for (std::size_t p = 0; p < st.s; ++p) h(p, p) += 2.0 * lambda;
    return h;
}

double power_iteration(const Mat& h) {
    const std::size_t n = h.rows;
    std::vector<double> x(n, 1.0 / std::sqrt(static_cast<double>(n))), y(n);
    double estimate = 0.0;
    for (int it = 0; it < 500; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double v = 0.0;
            for (std::size_t j = 0; j < n; ++j) v += h(i, j) * x[j];
            y[i] = v;
        }
        const double norm = std::sqrt(std::inner_product(y.begin(), y.end(), y.begin(), 0.0));
        if (norm == 0.0) return 0.0;
        for (std::size_t i = 0; i < n; ++i) x[i] = y[i] / norm;
        if (std::abs(norm - estimate) <= 1e-12 * norm) return norm;
        estimate = norm;
    }
    return estimate;
}

void write_f32(std::ostream& os, double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
    os.write(bytes, 4);
}

double read_f32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated adapter data");
    const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t{b[3]} << 24);
    return std::bit_cast<float>(bits);
}

}  // namespace

ModelConfig default_student_config(const ModelConfig& teacher, std::uint64_t seed) {
    ModelConfig c = teacher;
    c.num_blocks = 2;
    c.embed_dim = 32;
    c.global_blocks = {1};
    c.fpn_dims = {32, 32, 32};
    c.num_heads = 2;
    c.seed = seed;
    c.validate();
    return c;
}

std::size_t Adapter::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.weight.size() + l.bias.size();
    return n;
}

void Adapter::validate() const {
    for (std::size_t l = 0; l < 3; ++l) {
        const auto& a = levels[l];
        if (a.weight.rank() != 2 || a.bias.rank() != 1 || a.weight.dim(1) != a.bias.dim(0)) {
            throw DimensionError("adapter level " + std::to_string(l) + " has weight " +
                                 shape_str(a.weight.shape()) + " and bias " + shape_str(a.bias.shape()));
        }
        for (const Tensor* t : {&a.weight, &a.bias}) {
            for (double v : t->data()) {
                if (!std::isfinite(v)) {
                    throw std::invalid_argument("adapter level " + std::to_string(l) +
                                                " holds a non-finite value");
                }
            }
        }
    }
}

FpnFeatures apply_adapter(const Adapter& adapter, const FpnFeatures& student) {
    FpnFeatures out = student;
    for (std::size_t l = 0; l < 3; ++l) {
        const auto& a = adapter.levels[l];
        if (student.levels[l].rank() != 2 || student.levels[l].dim(1) != a.weight.dim(0)) {
            throw DimensionError("adapter level " + std::to_string(l) + " expects width " +
                                 std::to_string(a.weight.dim(0)) + ", got " +
                                 shape_str(student.levels[l].shape()));
        }
        out.levels[l] = linear(student.levels[l], a.weight, a.bias, PrecisionMode::Fp32);
    }
    out.mode = PrecisionMode::Fp32;
    return out;
}

double distill_loss(const Adapter& adapter, const std::vector<FpnFeatures>& student,
                    const std::vector<FpnFeatures>& teacher) {
    check_pairs(student, teacher);
    double total = 0.0;
    for (std::size_t i = 0; i < student.size(); ++i) {
        const FpnFeatures mapped = apply_adapter(adapter, student[i]);
        for (std::size_t l = 0; l < 3; ++l) {
            if (mapped.levels[l].shape() != teacher[i].levels[l].shape()) {
                throw DimensionError("adapter level " + std::to_string(l) + " maps to " +
                                     shape_str(mapped.levels[l].shape()) + ", teacher is " +
                                     shape_str(teacher[i].levels[l].shape()));
            }
            const double d = l2_distance(mapped.levels[l], teacher[i].levels[l]);
            total += d * d;
        }
    }
    return total / static_cast<double>(student.size());
}

std::vector<FpnFeatures> extract_features(const DetectorModel& model, const std::vector<Tensor>& images,
                                          std::size_t jobs) {
    std::vector<FpnFeatures> out(images.size());
    parallel_for(images.size(), jobs, [&](std::size_t i) {
        out[i] = backbone_forward(model, images[i], PrecisionMode::Fp32);
    });
    return out;
}

Adapter fit_adapter_closed_form(const std::vector<FpnFeatures>& student,
                                const std::vector<FpnFeatures>& teacher, double lambda) {
    check_pairs(student, teacher);
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw std::invalid_argument("ridge lambda must be finite and non-negative");
    }
    Adapter adapter;
    adapter.meta.method = "closed-form";
    adapter.meta.lambda = lambda;
    for (std::size_t l = 0; l < 3; ++l) {
        const LevelStats st = level_stats(student, teacher, l);
        if (st.rows < st.s + 1) {
            throw std::invalid_argument("level " + std::to_string(l) + " has " + std::to_string(st.rows) +
                                        " feature rows; at least " + std::to_string(st.s + 1) +
                                        " are needed for a well-posed fit (add images)");
        }
        // Normal equations of (1/M)||A theta - Y||^2 + lambda ||W||^2, scaled by M.
        Mat lhs = st.gram;
        for (std::size_t p = 0; p < st.s; ++p) lhs(p, p) += lambda * static_cast<double>(st.images);
        if (!cholesky(lhs)) {
            throw std::runtime_error("level " + std::to_string(l) +
                                     " features are rank deficient" +
                                     (lambda == 0.0 ? "; use a ridge lambda > 0" : "; increase lambda"));
        }
        adapter.levels[l] = from_theta(cholesky_solve(lhs, st.cross), st.s, st.t);
    }
    adapter.meta.final_loss = distill_loss(adapter, student, teacher);
    return adapter;
}

Adapter fit_adapter_closed_form(const DetectorModel& student, const DetectorModel& teacher,
                                const std::vector<Tensor>& images, double lambda, std::size_t jobs) {
    return fit_adapter_closed_form(extract_features(student, images, jobs),
                                   extract_features(teacher, images, jobs), lambda);
}

std::array<double, 3> hessian_lambda_max(const std::vector<FpnFeatures>& student, double lambda) {
    std::array<double, 3> out{};
    for (std::size_t l = 0; l < 3; ++l) out[l] = power_iteration(hessian(level_stats(student, student, l), lambda));
    return out;
}

Adapter fit_adapter_gd(const std::vector<FpnFeatures>& student, const std::vector<FpnFeatures>& teacher,
                       const GdOptions& options) {
    check_pairs(student, teacher);
    if (options.steps == 0) throw std::invalid_argument("gradient descent needs at least one step");
    if (options.step_size && !(*options.step_size > 0.0)) {
        throw std::invalid_argument("step size must be positive");
    }
    if (!(options.lambda >= 0.0)) throw std::invalid_argument("ridge lambda must be non-negative");

    Adapter adapter;
    adapter.meta.method = "gd";
    adapter.meta.steps = options.steps;
    adapter.meta.lambda = options.lambda;

    std::array<LevelStats, 3> stats;
    std::array<Mat, 3> theta, hess;
    for (std::size_t l = 0; l < 3; ++l) {
        stats[l] = level_stats(student, teacher, l);
        hess[l] = hessian(stats[l], options.lambda);
        theta[l] = Mat(stats[l].s + 1, stats[l].t);
        const double lmax = power_iteration(hess[l]);
        adapter.meta.step_size[l] = options.step_size ? *options.step_size : (lmax > 0.0 ? 1.0 / lmax : 1.0);
    }
    auto total = [&] {
        double sum = 0.0;
        for (std::size_t l = 0; l < 3; ++l) sum += objective(stats[l], theta[l], options.lambda);
        return sum;
    };

    adapter.loss_curve.push_back(total());
    for (std::size_t step = 1; step <= options.steps; ++step) {
        for (std::size_t l = 0; l < 3; ++l) {
            const LevelStats& st = stats[l];
            const std::size_t a = st.s + 1;
            const double m = static_cast<double>(st.images);
            // grad = H theta - (2/M) C
            Mat grad(a, st.t);
            for (std::size_t p = 0; p < a; ++p) {
                for (std::size_t q = 0; q < a; ++q) {
                    const double h = hess[l](p, q);
                    for (std::size_t c = 0; c < st.t; ++c) grad(p, c) += h * theta[l](q, c);
                }
                for (std::size_t c = 0; c < st.t; ++c) grad(p, c) -= 2.0 / m * st.cross(p, c);
            }
            for (std::size_t i = 0; i < grad.v.size(); ++i) theta[l].v[i] -= adapter.meta.step_size[l] * grad.v[i];
        }
        const double loss = total();
        if (!std::isfinite(loss)) {
            throw DivergenceError(step, "gradient descent diverged at step " + std::to_string(step) +
                                            " (objective is no longer finite); lower the step size");
        }
        adapter.loss_curve.push_back(loss);
    }
    for (std::size_t l = 0; l < 3; ++l) adapter.levels[l] = from_theta(theta[l], stats[l].s, stats[l].t);
    adapter.meta.final_loss = distill_loss(adapter, student, teacher);
    return adapter;
}

Adapter fit_adapter_gd(const DetectorModel& student, const DetectorModel& teacher,
                       const std::vector<Tensor>& images, const GdOptions& options, std::size_t jobs) {
    return fit_adapter_gd(extract_features(student, images, jobs), extract_features(teacher, images, jobs),
                          options);
}

Adapter random_adapter(const std::array<std::size_t, 3>& student_dims,
                       const std::array<std::size_t, 3>& teacher_dims, std::uint64_t seed) {
    Adapter adapter;
    adapter.meta.method = "random";
    for (std::size_t l = 0; l < 3; ++l) {
        const std::size_t s = student_dims[l], t = teacher_dims[l];
        const CounterRng rng(seed, "adapter.level" + std::to_string(l));
        std::vector<double> w(s * t);
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = static_cast<float>(rng.symmetric(i) / std::sqrt(static_cast<double>(s)));
        }
        adapter.levels[l] = {Tensor({s, t}, std::move(w)), Tensor::zeros({t})};
    }
    return adapter;
}

PlantedProblem planted_problem(std::uint64_t seed, std::size_t images,
                               const std::array<std::size_t, 3>& rows,
                               const std::array<std::size_t, 3>& student_dims,
                               const std::array<std::size_t, 3>& teacher_dims, double noise) {
    PlantedProblem p;
    p.truth = random_adapter(student_dims, teacher_dims, seed);
    p.truth.meta.method = "planted";
    for (std::size_t l = 0; l < 3; ++l) {
        const CounterRng rng(seed, "planted.bias" + std::to_string(l));
        std::vector<double> b(teacher_dims[l]);
        for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.symmetric(i);
        p.truth.levels[l].bias = Tensor({teacher_dims[l]}, std::move(b));
    }
    const double amp = std::sqrt(3.0);
    for (std::size_t i = 0; i < images; ++i) {
        FpnFeatures x, y;
        x.model_seed = y.model_seed = seed;
        for (std::size_t l = 0; l < 3; ++l) {
            const std::string key = std::to_string(i) + "." + std::to_string(l);
            const CounterRng xr(seed, "planted.x" + key), nr(seed, "planted.noise" + key);
            std::vector<double> xv(rows[l] * student_dims[l]);
            for (std::size_t k = 0; k < xv.size(); ++k) xv[k] = amp * xr.symmetric(k);
            x.levels[l] = Tensor({rows[l], student_dims[l]}, std::move(xv));
            const Tensor clean = linear(x.levels[l], p.truth.levels[l].weight, p.truth.levels[l].bias,
                                        PrecisionMode::Fp32);
            std::vector<double> yv(clean.data().begin(), clean.data().end());
            if (noise > 0.0) {
                for (std::size_t k = 0; k < yv.size(); ++k) yv[k] += noise * nr.symmetric(k);
            }
            y.levels[l] = Tensor(clean.shape(), std::move(yv));
        }
        p.student.push_back(std::move(x));
        p.teacher.push_back(std::move(y));
    }
    return p;
}

Adapter identity_adapter(const std::array<std::size_t, 3>& dims) {
    Adapter adapter;
    adapter.meta.method = "identity";
    for (std::size_t l = 0; l < 3; ++l) {
        std::vector<double> w(dims[l] * dims[l], 0.0);
        for (std::size_t i = 0; i < dims[l]; ++i) w[i * dims[l] + i] = 1.0;
        adapter.levels[l] = {Tensor({dims[l], dims[l]}, std::move(w)), Tensor::zeros({dims[l]})};
    }
    return adapter;
}

AgreementReport evaluate_agreement(const DetectorModel& teacher, const DetectorModel& student,
                                   const Adapter& adapter, const std::vector<Tensor>& images,
                                   const std::vector<std::string>& class_names,
                                   const PipelineConfig& cfg) {
    AgreementReport report;
    report.encdec_checksum_before = weights_checksum(teacher, encdec_weight_prefixes());
    for (const auto& image : images) {
        const FpnFeatures t_fpn = backbone_forward(teacher, image, cfg.backbone_mode);
        FpnFeatures s_fpn = apply_adapter(adapter, backbone_forward(student, image, cfg.backbone_mode));
        s_fpn.model_seed = t_fpn.model_seed;
        for (std::size_t l = 0; l < 3; ++l) {
            report.level_cosine[l] += cosine_similarity(t_fpn.levels[l], s_fpn.levels[l]);
        }
        RunContext t_ctx, s_ctx;
        const auto t_dets = decode_batched(teacher, t_fpn, class_names, cfg, t_ctx);
        const auto s_dets = decode_batched(teacher, s_fpn, class_names, cfg, s_ctx);
        report.teacher_detections += t_dets.size();
        report.student_detections += s_dets.size();
        for (const auto& td : t_dets) {
            const bool hit = std::any_of(s_dets.begin(), s_dets.end(), [&](const Detection& sd) {
                return sd.class_id == td.class_id && box_iou(sd.box, td.box) >= 0.5;
            });
            if (hit) ++report.matched;
        }
    }
    if (!images.empty()) {
        for (auto& c : report.level_cosine) c /= static_cast<double>(images.size());
    }
    report.agreement = report.teacher_detections
                           ? static_cast<double>(report.matched) / static_cast<double>(report.teacher_detections)
                           : 1.0;
    report.encdec_checksum_after = weights_checksum(teacher, encdec_weight_prefixes());
    return report;
}

void save_adapter(const Adapter& adapter, const std::filesystem::path& path) {
    adapter.validate();
    nlohmann::ordered_json header;
    header["format"] = "dart-adapter-1";
    header["method"] = adapter.meta.method;
    header["steps"] = adapter.meta.steps;
    header["step_size"] = adapter.meta.step_size;
    header["lambda"] = adapter.meta.lambda;
    header["final_loss"] = adapter.meta.final_loss;
    header["levels"] = nlohmann::ordered_json::array();
    for (const auto& l : adapter.levels) header["levels"].push_back({l.weight.dim(0), l.weight.dim(1)});
    header["loss_curve"] = adapter.loss_curve;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << header.dump() << '\n';
    for (const auto& l : adapter.levels) {
        for (double v : l.weight.data()) write_f32(os, v);
        for (double v : l.bias.data()) write_f32(os, v);
    }
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

Adapter load_adapter(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open adapter file " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error(path.string() + " has no adapter header");
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "dart-adapter-1") {
        throw std::runtime_error(path.string() + " is not a dart adapter file");
    }
    Adapter adapter;
    adapter.meta.method = header.at("method").get<std::string>();
    adapter.meta.steps = header.at("steps").get<std::size_t>();
    adapter.meta.step_size = header.at("step_size").get<std::array<double, 3>>();
    adapter.meta.lambda = header.at("lambda").get<double>();
    adapter.meta.final_loss = header.at("final_loss").get<double>();
    adapter.loss_curve = header.at("loss_curve").get<std::vector<double>>();
    const auto& levels = header.at("levels");
    if (levels.size() != 3) throw std::runtime_error("adapter file must hold exactly 3 levels");
    for (std::size_t l = 0; l < 3; ++l) {
        const auto s = levels[l].at(0).get<std::size_t>(), t = levels[l].at(1).get<std::size_t>();
        std::vector<double> w(s * t), b(t);
        for (auto& v : w) v = read_f32(is);
        for (auto& v : b) v = read_f32(is);
        adapter.levels[l] = {Tensor({s, t}, std::move(w)), Tensor({t}, std::move(b))};
    }
    adapter.validate();
    return adapter;
}

}  // namespace dart
