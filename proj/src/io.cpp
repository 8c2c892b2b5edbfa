#include "ccombat/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <system_error>
#include <unistd.h>

namespace ccombat::io {

namespace {

constexpr const char* kSubjectColumn = "subject_id";
constexpr const char* kSiteColumn = "site_id";
constexpr const char* kRegionColumn = "region";
constexpr const char* kValueColumn = "value";

[[noreturn]] void schema_error(const std::string& msg) { throw Error(ErrorKind::SchemaError, msg); }

const json& require(const json& obj, const char* key, const std::string& context) {
    auto it = obj.find(key);
    if (it == obj.end()) schema_error(context + ": missing key '" + key + "'");
    return *it;
}

void require_object(const json& j, const std::string& context) {
    if (!j.is_object()) schema_error(context + " must be an object");
}

double get_number(const json& j, const std::string& context) {
    if (!j.is_number()) schema_error(context + " must be a number");
    return j.get<double>();
}

template <class T>
T get_integer(const json& j, const std::string& context) {
    if (!j.is_number_integer() && !j.is_number_unsigned()) schema_error(context + " must be an integer");
    if (j.is_number_unsigned()) return static_cast<T>(j.get<std::uint64_t>());
    const auto v = j.get<std::int64_t>();
    if constexpr (std::is_unsigned_v<T>) {
        if (v < 0) schema_error(context + " must be non-negative");
    }
    return static_cast<T>(v);
}

std::string get_string(const json& j, const std::string& context) {
    if (!j.is_string()) schema_error(context + " must be a string");
    return j.get<std::string>();
}

std::vector<double> get_numbers(const json& j, const std::string& context) {
    if (!j.is_array()) schema_error(context + " must be an array");
    std::vector<double> out;
    for (const auto& v : j) out.push_back(get_number(v, context));
    return out;
}

std::vector<std::string> get_strings(const json& j, const std::string& context) {
    if (!j.is_array()) schema_error(context + " must be an array");
    std::vector<std::string> out;
    for (const auto& v : j) out.push_back(get_string(v, context));
    return out;
}

json vector_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

Eigen::VectorXd vector_from_json(const json& j, const std::string& context) {
    const auto values = get_numbers(j, context);
    Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) v(static_cast<Eigen::Index>(i)) = values[i];
    return v;
}

std::string basis_mode_name(BasisMode m) {
    return m == BasisMode::MonomialsUpToP ? "monomials" : "kernel_expansion";
}

BasisMode basis_mode_from(const std::string& s) {
    if (s == "monomials") return BasisMode::MonomialsUpToP;
    if (s == "kernel_expansion") return BasisMode::LiteralKernelExpansion;
    schema_error("unknown basis mode '" + s + "'");
}

std::string quote_csv(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::set<std::string> reserved_columns(const TableSchema& schema) {
    std::set<std::string> r{kSubjectColumn, kSiteColumn, kProvenanceColumn};
    for (const auto& c : schema.covariates) r.insert(c.name);
    return r;
}

std::size_t require_column(const Table& t, const std::string& name) {
    auto c = t.column(name);
    if (!c) schema_error("table has no '" + name + "' column");
    return *c;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::SchemaError:
    case ErrorKind::UnsupportedVersion:
    case ErrorKind::InvalidArgument:
        return 2;
    case ErrorKind::InsufficientData:
    case ErrorKind::InsufficientRegions:
    case ErrorKind::SingularDesign:
    case ErrorKind::DegenerateVariance:
    case ErrorKind::ConvergenceFailure:
        return 3;
    case ErrorKind::CovariateMismatch:
    case ErrorKind::RegionMismatch:
    case ErrorKind::UnknownRegion:
    case ErrorKind::UnknownSite:
    case ErrorKind::AlignmentError:
        return 4;
    }
    return 1;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& text, const std::string& context) {
    const char* first = text.data();
    const char* last = text.data() + text.size();
    while (first < last && (*first == ' ' || *first == '\t')) ++first;
    while (last > first && (last[-1] == ' ' || last[-1] == '\t')) --last;
    if (first < last && *first == '+') ++first;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (first == last || ec != std::errc() || ptr != last || !std::isfinite(v))
        schema_error(context + ": '" + text + "' is not a finite number");
    return v;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) schema_error("cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            schema_error("failed writing '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        schema_error("cannot move output into '" + path.string() + "'");
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) schema_error("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::optional<std::size_t> Table::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    return std::nullopt;
}

Table parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> lines;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool field_started = false;
    std::size_t i = 0;
    auto end_field = [&] {
        row.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_row = [&] {
        end_field();
        const bool blank = row.size() == 1 && row.front().empty();
        if (!blank) lines.push_back(std::move(row));
        row.clear();
    };
    while (i < text.size()) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"' && !field_started) {
            quoted = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            end_row();
        } else {
            field += c;
            field_started = true;
        }
        ++i;
    }
    if (quoted) schema_error("unterminated quoted field");
    if (field_started || !row.empty()) end_row();

    if (lines.empty()) schema_error("table has no header row");
    Table t;
    t.header = std::move(lines.front());
    std::set<std::string> seen;
    for (const auto& h : t.header) {
        if (h.empty()) schema_error("empty column name in header");
        if (!seen.insert(h).second) schema_error("duplicate column '" + h + "'");
    }
    for (std::size_t r = 1; r < lines.size(); ++r) {
        if (lines[r].size() != t.header.size())
            schema_error("row " + std::to_string(r) + " has " + std::to_string(lines[r].size()) +
                         " cells, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(lines[r]));
    }
    return t;
}

std::string to_csv(const Table& table) {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += quote_csv(cells[i]);
        }
        out += '\n';
    };
    line(table.header);
    for (const auto& r : table.rows) line(r);
    return out;
}

double CovariateSpec::decode(const std::string& cell, const std::string& context) const {
    if (type == CovariateType::Numeric) return parse_double(cell, context);
    auto it = encoding.find(cell);
    if (it == encoding.end()) schema_error(context + ": '" + cell + "' has no declared encoding");
    return it->second;
}

std::string CovariateSpec::encode(double value) const {
    if (type == CovariateType::Categorical) {
        for (const auto& [label, code] : encoding) {
            if (code == value) return label;
        }
    }
    return format_double(value);
}

bool is_long_layout(const Table& table) {
    return table.column(kRegionColumn).has_value() && table.column(kValueColumn).has_value();
}

std::vector<std::string> region_columns(const Table& table, const TableSchema& schema) {
    const auto reserved = reserved_columns(schema);
    std::vector<std::string> regions;
    for (const auto& h : table.header) {
        if (!reserved.count(h)) regions.push_back(h);
    }
    return regions;
}

std::vector<SubjectRecord> table_to_records(const Table& input, const TableSchema& schema) {
    const Table table = is_long_layout(input) ? long_to_wide(input, schema) : input;
    const auto subj = require_column(table, kSubjectColumn);
    require_column(table, kSiteColumn);
    std::vector<std::size_t> cov_cols;
    for (const auto& c : schema.covariates) {
        auto col = table.column(c.name);
        if (!col) throw Error(ErrorKind::CovariateMismatch, "table has no covariate column '" + c.name + "'");
        cov_cols.push_back(*col);
    }
    std::vector<std::pair<std::string, std::size_t>> regions;
    for (const auto& r : region_columns(table, schema)) regions.emplace_back(r, *table.column(r));

    std::vector<SubjectRecord> out;
    out.reserve(table.rows.size());
    std::set<std::string> ids;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        SubjectRecord rec;
        rec.subject_id = row[subj];
        if (rec.subject_id.empty()) schema_error("row " + std::to_string(i + 1) + " has no subject_id");
        if (!ids.insert(rec.subject_id).second) schema_error("duplicate subject '" + rec.subject_id + "'");
        for (std::size_t k = 0; k < cov_cols.size(); ++k) {
            const auto& spec = schema.covariates[k];
            rec.covariates.names.push_back(spec.name);
            rec.covariates.values.push_back(
                spec.decode(row[cov_cols[k]], "subject '" + rec.subject_id + "' covariate '" + spec.name + "'"));
        }
        for (const auto& [name, col] : regions) {
            rec.metrics[name] = parse_double(row[col], "subject '" + rec.subject_id + "' region '" + name + "'");
        }
        out.push_back(std::move(rec));
    }
    return out;
}

SiteDataset table_to_dataset(const Table& input, const TableSchema& schema,
                             const std::optional<std::string>& site_filter) {
    const Table table = is_long_layout(input) ? long_to_wide(input, schema) : input;
    const auto site_col = require_column(table, kSiteColumn);
    Table kept;
    kept.header = table.header;
    std::optional<std::string> site = site_filter;
    for (const auto& row : table.rows) {
        if (!site) site = row[site_col];
        if (row[site_col] == *site) {
            kept.rows.push_back(row);
        } else if (!site_filter) {
            schema_error("table mixes sites '" + *site + "' and '" + row[site_col] + "'");
        }
    }
    SiteDataset data;
    data.site_id = site.value_or("");
    data.metric_name = schema.metric_name;
    data.records = table_to_records(kept, schema);
    return data;
}

Table dataset_to_table(const SiteDataset& data, const TableSchema& schema) {
    Table t;
    t.header = {kSubjectColumn, kSiteColumn};
    std::vector<const CovariateSpec*> specs;
    const auto names = data.covariate_names();
    for (const auto& n : names) {
        const CovariateSpec* found = nullptr;
        for (const auto& c : schema.covariates) {
            if (c.name == n) found = &c;
        }
        specs.push_back(found);
        t.header.push_back(n);
    }
    const auto regions = data.region_ids();
    for (const auto& r : regions) t.header.push_back(r);
    for (const auto& rec : data.records) {
        std::vector<std::string> row{rec.subject_id, data.site_id};
        for (std::size_t k = 0; k < names.size(); ++k) {
            const double v = rec.covariates.values.at(k);
            row.push_back(specs[k] ? specs[k]->encode(v) : format_double(v));
        }
        for (const auto& r : regions) row.push_back(format_double(rec.metrics.at(r)));
        t.rows.push_back(std::move(row));
    }
    return t;
}

Table wide_to_long(const Table& wide, const TableSchema& schema) {
    const auto regions = region_columns(wide, schema);
    Table t;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < wide.header.size(); ++i) {
        if (std::find(regions.begin(), regions.end(), wide.header[i]) == regions.end()) {
            keep.push_back(i);
            t.header.push_back(wide.header[i]);
        }
    }
    t.header.push_back(kRegionColumn);
    t.header.push_back(kValueColumn);
    for (const auto& row : wide.rows) {
        for (const auto& r : regions) {
            std::vector<std::string> out;
            for (auto i : keep) out.push_back(row[i]);
            out.push_back(r);
            out.push_back(row[*wide.column(r)]);
            t.rows.push_back(std::move(out));
        }
    }
    return t;
}

Table long_to_wide(const Table& lt, const TableSchema& schema) {
    const auto subj = require_column(lt, kSubjectColumn);
    const auto reg = require_column(lt, kRegionColumn);
    const auto val = require_column(lt, kValueColumn);
    (void)schema;
    std::vector<std::size_t> fixed;
    for (std::size_t i = 0; i < lt.header.size(); ++i) {
        if (i != reg && i != val) fixed.push_back(i);
    }
    std::vector<std::string> subjects;
    std::map<std::string, std::vector<std::string>> fixed_cells;
    std::vector<std::string> regions;
    std::map<std::pair<std::string, std::string>, std::string> cells;
    for (const auto& row : lt.rows) {
        const auto& s = row[subj];
        std::vector<std::string> f;
        for (auto i : fixed) f.push_back(row[i]);
        auto it = fixed_cells.find(s);
        if (it == fixed_cells.end()) {
            subjects.push_back(s);
            fixed_cells.emplace(s, f);
        } else if (it->second != f) {
            schema_error("subject '" + s + "' has inconsistent non-region cells");
        }
        if (std::find(regions.begin(), regions.end(), row[reg]) == regions.end()) regions.push_back(row[reg]);
        if (!cells.emplace(std::make_pair(s, row[reg]), row[val]).second)
            schema_error("subject '" + s + "' repeats region '" + row[reg] + "'");
    }
    Table t;
    for (auto i : fixed) t.header.push_back(lt.header[i]);
    for (const auto& r : regions) t.header.push_back(r);
    for (const auto& s : subjects) {
        auto row = fixed_cells.at(s);
        for (const auto& r : regions) {
            auto it = cells.find({s, r});
            if (it == cells.end()) schema_error("subject '" + s + "' lacks region '" + r + "'");
            row.push_back(it->second);
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& context) {
    require_object(obj, context);
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) schema_error(context + ": unknown key '" + it.key() + "'");
    }
}

json to_json(const Hyperparameters& hp) {
    json j;
    j["degree"] = hp.degree;
    j["basis_mode"] = basis_mode_name(hp.basis_mode);
    j["nu"] = hp.nu;
    j["tau"] = hp.tau;
    if (hp.tau_lower) j["tau_lower"] = *hp.tau_lower;
    if (hp.tau_upper) j["tau_upper"] = *hp.tau_upper;
    if (hp.fixed_lambda) {
        j["lambda"] = *hp.fixed_lambda;
    } else {
        j["lambda"] = "auto";
    }
    j["autotune"] = {{"k", hp.autotune.k},
                     {"lambda_min", hp.autotune.lambda_min},
                     {"max_iters", hp.autotune.max_iters},
                     {"grid_points", hp.autotune.grid_points}};
    j["scaling"] = hp.scaling == VarianceScaling::StdRatio ? "std_ratio" : "variance_ratio";
    return j;
}

Hyperparameters hyperparameters_from_json(const json& j) {
    const std::string ctx = "hyperparameters";
    check_keys(j, {"degree", "basis_mode", "nu", "tau", "tau_lower", "tau_upper", "lambda", "autotune", "scaling"},
               ctx);
    Hyperparameters hp;
    if (j.contains("degree")) hp.degree = get_integer<int>(j["degree"], ctx + ".degree");
    if (j.contains("basis_mode")) hp.basis_mode = basis_mode_from(get_string(j["basis_mode"], ctx + ".basis_mode"));
    if (j.contains("nu")) hp.nu = get_number(j["nu"], ctx + ".nu");
    if (j.contains("tau")) hp.tau = get_number(j["tau"], ctx + ".tau");
    if (j.contains("tau_lower")) hp.tau_lower = get_number(j["tau_lower"], ctx + ".tau_lower");
    if (j.contains("tau_upper")) hp.tau_upper = get_number(j["tau_upper"], ctx + ".tau_upper");
    if (j.contains("lambda")) {
        const auto& l = j["lambda"];
        if (l.is_string()) {
            if (l.get<std::string>() != "auto") schema_error(ctx + ".lambda must be \"auto\", a number or an array");
        } else if (l.is_number()) {
            hp.fixed_lambda = std::vector<double>{l.get<double>()};
        } else {
            hp.fixed_lambda = get_numbers(l, ctx + ".lambda");
        }
    }
    if (j.contains("autotune")) {
        const auto& a = j["autotune"];
        check_keys(a, {"k", "lambda_min", "max_iters", "grid_points"}, ctx + ".autotune");
        if (a.contains("k")) hp.autotune.k = get_number(a["k"], ctx + ".autotune.k");
        if (a.contains("lambda_min")) hp.autotune.lambda_min = get_number(a["lambda_min"], ctx + ".autotune.lambda_min");
        if (a.contains("max_iters")) hp.autotune.max_iters = get_integer<int>(a["max_iters"], ctx + ".autotune.max_iters");
        if (a.contains("grid_points"))
            hp.autotune.grid_points = get_integer<int>(a["grid_points"], ctx + ".autotune.grid_points");
    }
    if (j.contains("scaling")) {
        const auto s = get_string(j["scaling"], ctx + ".scaling");
        if (s == "std_ratio") {
            hp.scaling = VarianceScaling::StdRatio;
        } else if (s == "variance_ratio") {
            hp.scaling = VarianceScaling::VarianceRatio;
        } else {
            schema_error(ctx + ".scaling: unknown value '" + s + "'");
        }
    }
    try {
        hp.validate();
    } catch (const Error& e) {
        schema_error(e.what());
    }
    return hp;
}

json to_json(const GeneratorSpec& spec) {
    json regions = json::array();
    for (const auto& r : spec.regions) {
        regions.push_back({{"region_id", r.region_id},
                           {"intercept", r.intercept},
                           {"coefficients", r.coefficients},
                           {"noise_std", r.noise_std}});
    }
    json dist;
    if (spec.age_distribution.kind == AgeDistributionKind::Uniform) {
        dist = {{"kind", "uniform"}};
    } else {
        dist = {{"kind", "truncated_gaussian"},
                {"mean", spec.age_distribution.mean},
                {"std", spec.age_distribution.std}};
    }
    return {{"site_id", spec.site_id},
            {"metric_name", spec.metric_name},
            {"n_subjects", spec.n_subjects},
            {"age_range", {spec.age_min, spec.age_max}},
            {"age_distribution", dist},
            {"age_center", spec.age_center},
            {"age_scale", spec.age_scale},
            {"regions", regions},
            {"seed", spec.seed}};
}

GeneratorSpec generator_spec_from_json(const json& j) {
    const std::string ctx = "generator";
    require_object(j, ctx);
    GeneratorSpec spec;
    if (j.contains("fixture")) {
        check_keys(j, {"fixture", "seed", "n_subjects", "site_id", "metric_name"}, ctx);
        if (get_string(j["fixture"], ctx + ".fixture") != "default")
            schema_error(ctx + ".fixture: only \"default\" is available");
        spec = default_fixture();
        if (j.contains("seed")) spec.seed = get_integer<std::uint64_t>(j["seed"], ctx + ".seed");
        if (j.contains("n_subjects")) spec.n_subjects = get_integer<std::size_t>(j["n_subjects"], ctx + ".n_subjects");
        if (j.contains("site_id")) spec.site_id = get_string(j["site_id"], ctx + ".site_id");
        if (j.contains("metric_name")) spec.metric_name = get_string(j["metric_name"], ctx + ".metric_name");
    } else {
        check_keys(j, {"site_id", "metric_name", "n_subjects", "age_range", "age_distribution", "age_center",
                       "age_scale", "regions", "seed"},
                   ctx);
        if (j.contains("site_id")) spec.site_id = get_string(j["site_id"], ctx + ".site_id");
        if (j.contains("metric_name")) spec.metric_name = get_string(j["metric_name"], ctx + ".metric_name");
        spec.n_subjects = get_integer<std::size_t>(require(j, "n_subjects", ctx), ctx + ".n_subjects");
        const auto range = get_numbers(require(j, "age_range", ctx), ctx + ".age_range");
        if (range.size() != 2) schema_error(ctx + ".age_range must have two entries");
        spec.age_min = range[0];
        spec.age_max = range[1];
        if (j.contains("age_distribution")) {
            const auto& d = j["age_distribution"];
            check_keys(d, {"kind", "mean", "std"}, ctx + ".age_distribution");
            const auto kind = get_string(require(d, "kind", ctx + ".age_distribution"), ctx + ".age_distribution.kind");
            if (kind == "uniform") {
                spec.age_distribution.kind = AgeDistributionKind::Uniform;
            } else if (kind == "truncated_gaussian") {
                spec.age_distribution.kind = AgeDistributionKind::TruncatedGaussian;
                spec.age_distribution.mean = get_number(require(d, "mean", ctx), ctx + ".age_distribution.mean");
                spec.age_distribution.std = get_number(require(d, "std", ctx), ctx + ".age_distribution.std");
            } else {
                schema_error(ctx + ".age_distribution.kind: unknown value '" + kind + "'");
            }
        }
        spec.age_center = j.contains("age_center") ? get_number(j["age_center"], ctx + ".age_center")
                                                   : 0.5 * (spec.age_min + spec.age_max);
        spec.age_scale = j.contains("age_scale") ? get_number(j["age_scale"], ctx + ".age_scale")
                                                 : 0.5 * (spec.age_max - spec.age_min);
        const auto& regions = require(j, "regions", ctx);
        if (!regions.is_array()) schema_error(ctx + ".regions must be an array");
        for (const auto& r : regions) {
            check_keys(r, {"region_id", "intercept", "coefficients", "noise_std"}, ctx + ".regions[]");
            RegionCurve c;
            c.region_id = get_string(require(r, "region_id", ctx), ctx + ".regions[].region_id");
            c.intercept = get_number(require(r, "intercept", ctx), ctx + ".regions[].intercept");
            c.coefficients = get_numbers(require(r, "coefficients", ctx), ctx + ".regions[].coefficients");
            c.noise_std = get_number(require(r, "noise_std", ctx), ctx + ".regions[].noise_std");
            if (!(c.noise_std > 0.0)) schema_error(ctx + ".regions[].noise_std must be > 0");
            spec.regions.push_back(std::move(c));
        }
        if (j.contains("seed")) spec.seed = get_integer<std::uint64_t>(j["seed"], ctx + ".seed");
    }
    try {
        spec.validate();
    } catch (const Error& e) {
        schema_error(e.what());
    }
    return spec;
}

json to_json(const BiasSpec& bias) {
    json j = {{"A", bias.A}, {"S", bias.S}, {"M", bias.M}};
    if (bias.b) j["b"] = *bias.b;
    return j;
}

BiasSpec bias_from_json(const json& j) {
    const std::string ctx = "bias";
    check_keys(j, {"A", "S", "M", "b"}, ctx);
    BiasSpec b;
    if (j.contains("A")) b.A = get_number(j["A"], ctx + ".A");
    if (j.contains("S")) b.S = get_number(j["S"], ctx + ".S");
    if (j.contains("M")) b.M = get_number(j["M"], ctx + ".M");
    if (j.contains("b")) b.b = get_number(j["b"], ctx + ".b");
    try {
        b.validate();
    } catch (const Error& e) {
        schema_error(e.what());
    }
    return b;
}

json to_json(const CovariateSpec& c) {
    json j = {{"name", c.name}, {"type", c.type == CovariateType::Numeric ? "numeric" : "categorical"}};
    if (c.type == CovariateType::Categorical) j["encoding"] = c.encoding;
    return j;
}

CovariateSpec covariate_spec_from_json(const json& j) {
    const std::string ctx = "covariates[]";
    check_keys(j, {"name", "type", "encoding"}, ctx);
    CovariateSpec c;
    c.name = get_string(require(j, "name", ctx), ctx + ".name");
    const auto type = j.contains("type") ? get_string(j["type"], ctx + ".type") : std::string("numeric");
    if (type == "numeric") {
        if (j.contains("encoding")) schema_error(ctx + ": numeric covariate '" + c.name + "' has an encoding");
    } else if (type == "categorical") {
        c.type = CovariateType::Categorical;
        const auto& enc = require(j, "encoding", ctx);
        require_object(enc, ctx + ".encoding");
        std::set<double> codes;
        for (auto it = enc.begin(); it != enc.end(); ++it) {
            const double code = get_number(it.value(), ctx + ".encoding");
            if (!codes.insert(code).second) schema_error(ctx + ": '" + c.name + "' reuses code " + format_double(code));
            c.encoding[it.key()] = code;
        }
        if (c.encoding.empty()) schema_error(ctx + ": '" + c.name + "' has an empty encoding");
    } else {
        schema_error(ctx + ".type: unknown value '" + type + "'");
    }
    return c;
}

RunConfig run_config_from_json(const json& j) {
    check_keys(j, {"covariates", "metric_name", "hyperparameters", "seed", "threads", "experiment"}, "config");
    RunConfig rc;
    if (j.contains("covariates")) {
        if (!j["covariates"].is_array()) schema_error("config.covariates must be an array");
        std::set<std::string> names;
        for (const auto& c : j["covariates"]) {
            rc.schema.covariates.push_back(covariate_spec_from_json(c));
            if (!names.insert(rc.schema.covariates.back().name).second)
                schema_error("config.covariates: duplicate '" + rc.schema.covariates.back().name + "'");
        }
    } else {
        rc.schema.covariates.push_back({"age", CovariateType::Numeric, {}});
    }
    if (j.contains("metric_name")) rc.schema.metric_name = get_string(j["metric_name"], "config.metric_name");
    if (j.contains("hyperparameters")) rc.hp = hyperparameters_from_json(j["hyperparameters"]);
    if (j.contains("seed")) rc.seed = get_integer<std::uint64_t>(j["seed"], "config.seed");
    if (j.contains("threads")) rc.threads = get_integer<int>(j["threads"], "config.threads");
    if (j.contains("experiment")) {
        require_object(j["experiment"], "config.experiment");
        rc.experiment = j["experiment"];
        experiment_from_json(rc);  // validate now, before any computation
    }
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        schema_error("config '" + path.string() + "': " + e.what());
    }
    return run_config_from_json(j);
}

namespace {

std::vector<std::size_t> get_sizes(const json& j, const std::string& ctx) {
    if (!j.is_array()) schema_error(ctx + " must be an array");
    std::vector<std::size_t> out;
    for (const auto& v : j) out.push_back(get_integer<std::size_t>(v, ctx));
    return out;
}

json eb_to_json(const EBOptions& eb) {
    return {{"tol", eb.tol},
            {"max_iters", eb.max_iters},
            {"init", eb.init == EBInitialization::SampleVariance ? "sample_variance" : "unit"}};
}

}  // namespace

ExperimentConfig experiment_from_json(const RunConfig& run) {
    const json& j = run.experiment;
    const std::string ctx = "experiment";
    check_keys(j, {"generator", "repetitions", "methods", "regions", "eb", "bias_grid", "sample_size", "age_window",
                   "nu_sweep"},
               ctx);
    ExperimentConfig ec;
    auto& s = ec.settings;
    s.hp = run.hp;
    if (run.seed) s.seed = *run.seed;
    if (run.threads) s.threads = *run.threads;
    if (j.contains("generator")) s.spec = generator_spec_from_json(j["generator"]);
    if (j.contains("repetitions")) s.repetitions = get_integer<int>(j["repetitions"], ctx + ".repetitions");
    if (j.contains("methods")) {
        s.methods.clear();
        for (const auto& m : get_strings(j["methods"], ctx + ".methods")) {
            try {
                s.methods.push_back(method_from_string(m));
            } catch (const Error& e) {
                schema_error(e.what());
            }
        }
    }
    if (j.contains("regions")) s.regions = get_strings(j["regions"], ctx + ".regions");
    if (j.contains("eb")) {
        const auto& e = j["eb"];
        check_keys(e, {"tol", "max_iters", "init"}, ctx + ".eb");
        if (e.contains("tol")) s.eb.tol = get_number(e["tol"], ctx + ".eb.tol");
        if (e.contains("max_iters")) s.eb.max_iters = get_integer<int>(e["max_iters"], ctx + ".eb.max_iters");
        if (e.contains("init")) {
            const auto init = get_string(e["init"], ctx + ".eb.init");
            if (init == "sample_variance") {
                s.eb.init = EBInitialization::SampleVariance;
            } else if (init == "unit") {
                s.eb.init = EBInitialization::Unit;
            } else {
                schema_error(ctx + ".eb.init: unknown value '" + init + "'");
            }
        }
    }
    if (j.contains("bias_grid")) {
        const auto& g = j["bias_grid"];
        const std::string c = ctx + ".bias_grid";
        check_keys(g, {"S", "M", "A", "n_reference", "n_moving"}, c);
        if (g.contains("S")) ec.bias_grid.S = get_numbers(g["S"], c + ".S");
        if (g.contains("M")) ec.bias_grid.M = get_numbers(g["M"], c + ".M");
        if (g.contains("A")) ec.bias_grid.A = get_number(g["A"], c + ".A");
        if (g.contains("n_reference")) ec.bias_grid.n_reference = get_integer<std::size_t>(g["n_reference"], c);
        if (g.contains("n_moving")) ec.bias_grid.n_moving = get_integer<std::size_t>(g["n_moving"], c);
    }
    if (j.contains("sample_size")) {
        const auto& g = j["sample_size"];
        const std::string c = ctx + ".sample_size";
        check_keys(g, {"sizes", "bias", "n_reference", "n_moving", "n_test"}, c);
        if (g.contains("sizes")) ec.sample_size.sizes = get_sizes(g["sizes"], c + ".sizes");
        if (g.contains("bias")) ec.sample_size.bias = bias_from_json(g["bias"]);
        if (g.contains("n_reference")) ec.sample_size.n_reference = get_integer<std::size_t>(g["n_reference"], c);
        if (g.contains("n_moving")) ec.sample_size.n_moving = get_integer<std::size_t>(g["n_moving"], c);
        if (g.contains("n_test")) ec.sample_size.n_test = get_integer<std::size_t>(g["n_test"], c);
    }
    if (j.contains("age_window")) {
        const auto& g = j["age_window"];
        const std::string c = ctx + ".age_window";
        check_keys(g, {"centers", "half_width", "n_train", "tau", "bias", "n_reference", "n_moving", "n_test"}, c);
        if (g.contains("centers")) ec.age_window.centers = get_numbers(g["centers"], c + ".centers");
        if (g.contains("half_width")) ec.age_window.half_width = get_number(g["half_width"], c + ".half_width");
        if (g.contains("n_train")) ec.age_window.n_train = get_integer<std::size_t>(g["n_train"], c);
        if (g.contains("tau")) {
            if (g["tau"].is_null()) {
                ec.age_window.tau.reset();
            } else {
                ec.age_window.tau = get_number(g["tau"], c + ".tau");
            }
        }
        if (g.contains("bias")) ec.age_window.bias = bias_from_json(g["bias"]);
        if (g.contains("n_reference")) ec.age_window.n_reference = get_integer<std::size_t>(g["n_reference"], c);
        if (g.contains("n_moving")) ec.age_window.n_moving = get_integer<std::size_t>(g["n_moving"], c);
        if (g.contains("n_test")) ec.age_window.n_test = get_integer<std::size_t>(g["n_test"], c);
    }
    if (j.contains("nu_sweep")) {
        const auto& g = j["nu_sweep"];
        const std::string c = ctx + ".nu_sweep";
        check_keys(g, {"nu", "n_train", "n_test", "bias", "n_reference"}, c);
        if (g.contains("nu")) ec.nu_sweep.nu = get_numbers(g["nu"], c + ".nu");
        if (g.contains("n_train")) ec.nu_sweep.n_train = get_integer<std::size_t>(g["n_train"], c);
        if (g.contains("n_test")) ec.nu_sweep.n_test = get_integer<std::size_t>(g["n_test"], c);
        if (g.contains("bias")) ec.nu_sweep.bias = bias_from_json(g["bias"]);
        if (g.contains("n_reference")) ec.nu_sweep.n_reference = get_integer<std::size_t>(g["n_reference"], c);
    }
    if (s.repetitions < 1) schema_error(ctx + ".repetitions must be >= 1");
    return ec;
}

ExperimentReport run_experiment(const std::string& name, const ExperimentConfig& config) {
    if (name == "bias_grid") return run_bias_grid(config.bias_grid, config.settings);
    if (name == "sample_size") return run_sample_size_curve(config.sample_size, config.settings);
    if (name == "age_window") return run_age_window_curve(config.age_window, config.settings);
    if (name == "nu_sweep") return run_nu_sweep(config.nu_sweep, config.settings);
    throw Error(ErrorKind::InvalidArgument,
                "unknown experiment '" + name + "' (bias_grid, sample_size, age_window, nu_sweep)");
}

json to_json(const ModelFile& model) {
    const auto& b = model.bundle;
    b.validate();
    const auto& basis = b.basis();
    json scaling = json::array();
    for (const auto& s : basis.standardization) scaling.push_back({{"center", s.center}, {"scale", s.scale}});
    json covs = json::array();
    for (const auto& c : model.covariates) covs.push_back(to_json(c));
    json regions = json::object();
    for (const auto& [id, m] : b.models) {
        json r = {{"beta_ref", vector_json(m.beta_ref)},
                  {"var_ref", m.var_ref},
                  {"beta_mov", vector_json(m.beta_mov)},
                  {"var_mov", m.var_mov},
                  {"qc", b.qc.at(id)}};
        if (auto it = b.qc_before.find(id); it != b.qc_before.end()) r["qc_before"] = it->second;
        if (auto it = b.tuned_lambda.find(id); it != b.tuned_lambda.end()) r["lambda"] = vector_json(it->second);
        if (auto it = b.tune_converged.find(id); it != b.tune_converged.end()) r["tune_converged"] = it->second;
        regions[id] = std::move(r);
    }
    return {{"format", "ccombat-model"},
            {"schema_version", kModelSchemaVersion},
            {"reference_site_id", b.reference_site_id},
            {"moving_site_id", b.moving_site_id},
            {"metric_name", b.metric_name},
            {"hyperparameters", to_json(b.hyperparameters)},
            {"basis",
             {{"degree", basis.degree},
              {"mode", basis_mode_name(basis.mode)},
              {"covariate_names", basis.covariate_names},
              {"standardization", scaling}}},
            {"covariates", covs},
            {"regions", regions}};
}

ModelFile model_from_json(const json& j) {
    const std::string ctx = "model";
    require_object(j, ctx);
    if (!j.contains("schema_version")) schema_error("model has no schema_version");
    const int version = get_integer<int>(j["schema_version"], ctx + ".schema_version");
    if (version > kModelSchemaVersion)
        throw Error(ErrorKind::UnsupportedVersion, "model schema version " + std::to_string(version) +
                                                       " is newer than supported version " +
                                                       std::to_string(kModelSchemaVersion));
    if (version < 1) schema_error("model schema version must be >= 1");
    check_keys(j, {"format", "schema_version", "reference_site_id", "moving_site_id", "metric_name",
                   "hyperparameters", "basis", "covariates", "regions"},
               ctx);
    if (get_string(require(j, "format", ctx), ctx + ".format") != "ccombat-model")
        schema_error("not a ccombat model document");

    ModelFile mf;
    auto& b = mf.bundle;
    b.reference_site_id = get_string(require(j, "reference_site_id", ctx), ctx + ".reference_site_id");
    b.moving_site_id = get_string(require(j, "moving_site_id", ctx), ctx + ".moving_site_id");
    b.metric_name = get_string(require(j, "metric_name", ctx), ctx + ".metric_name");
    b.hyperparameters = hyperparameters_from_json(require(j, "hyperparameters", ctx));

    const auto& bj = require(j, "basis", ctx);
    check_keys(bj, {"degree", "mode", "covariate_names", "standardization"}, ctx + ".basis");
    BasisSpec basis;
    basis.degree = get_integer<int>(require(bj, "degree", ctx), ctx + ".basis.degree");
    basis.mode = basis_mode_from(get_string(require(bj, "mode", ctx), ctx + ".basis.mode"));
    basis.covariate_names = get_strings(require(bj, "covariate_names", ctx), ctx + ".basis.covariate_names");
    const auto& sj = require(bj, "standardization", ctx);
    if (!sj.is_array()) schema_error(ctx + ".basis.standardization must be an array");
    for (const auto& s : sj) {
        check_keys(s, {"center", "scale"}, ctx + ".basis.standardization[]");
        basis.standardization.push_back({get_number(require(s, "center", ctx), ctx + ".center"),
                                         get_number(require(s, "scale", ctx), ctx + ".scale")});
    }

    if (j.contains("covariates")) {
        if (!j["covariates"].is_array()) schema_error(ctx + ".covariates must be an array");
        for (const auto& c : j["covariates"]) mf.covariates.push_back(covariate_spec_from_json(c));
    }

    const auto& rj = require(j, "regions", ctx);
    require_object(rj, ctx + ".regions");
    for (auto it = rj.begin(); it != rj.end(); ++it) {
        const std::string rc = ctx + ".regions." + it.key();
        const auto& r = it.value();
        check_keys(r, {"beta_ref", "var_ref", "beta_mov", "var_mov", "qc", "qc_before", "lambda", "tune_converged"},
                   rc);
        RegionModel m;
        m.region_id = it.key();
        m.beta_ref = vector_from_json(require(r, "beta_ref", rc), rc + ".beta_ref");
        m.var_ref = get_number(require(r, "var_ref", rc), rc + ".var_ref");
        m.beta_mov = vector_from_json(require(r, "beta_mov", rc), rc + ".beta_mov");
        m.var_mov = get_number(require(r, "var_mov", rc), rc + ".var_mov");
        m.basis = basis;
        b.qc[m.region_id] = get_number(require(r, "qc", rc), rc + ".qc");
        if (r.contains("qc_before")) b.qc_before[m.region_id] = get_number(r["qc_before"], rc + ".qc_before");
        if (r.contains("lambda")) b.tuned_lambda[m.region_id] = vector_from_json(r["lambda"], rc + ".lambda");
        if (r.contains("tune_converged")) {
            if (!r["tune_converged"].is_boolean()) schema_error(rc + ".tune_converged must be a boolean");
            b.tune_converged[m.region_id] = r["tune_converged"].get<bool>();
        }
        b.models.emplace(m.region_id, std::move(m));
    }
    try {
        b.validate();
    } catch (const Error& e) {
        schema_error(e.what());
    }
    return mf;
}

std::string serialize_model(const ModelFile& model) { return to_json(model).dump(2) + "\n"; }

void save_model(const std::filesystem::path& path, const ModelFile& model) {
    write_file_atomic(path, serialize_model(model));
}

ModelFile load_model(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        schema_error("model '" + path.string() + "': " + e.what());
    }
    return model_from_json(j);
}

bool bundles_equal(const HarmonizationBundle& a, const HarmonizationBundle& b) {
    if (a.reference_site_id != b.reference_site_id || a.moving_site_id != b.moving_site_id ||
        a.metric_name != b.metric_name || !(a.hyperparameters == b.hyperparameters) || a.qc != b.qc ||
        a.qc_before != b.qc_before || a.tune_converged != b.tune_converged || a.models.size() != b.models.size() ||
        a.tuned_lambda.size() != b.tuned_lambda.size())
        return false;
    for (const auto& [id, m] : a.models) {
        auto it = b.models.find(id);
        if (it == b.models.end()) return false;
        const auto& n = it->second;
        if (m.region_id != n.region_id || m.var_ref != n.var_ref || m.var_mov != n.var_mov ||
            !(m.basis == n.basis) || m.beta_ref.size() != n.beta_ref.size() ||
            m.beta_mov.size() != n.beta_mov.size() || m.beta_ref != n.beta_ref || m.beta_mov != n.beta_mov)
            return false;
    }
    for (const auto& [id, l] : a.tuned_lambda) {
        auto it = b.tuned_lambda.find(id);
        if (it == b.tuned_lambda.end() || it->second.size() != l.size() || it->second != l) return false;
    }
    return true;
}

json to_json(const ExperimentReport& report) {
    const auto& s = report.settings;
    json methods = json::array();
    for (Method m : s.methods) methods.push_back(std::string(to_string(m)));
    json conditions = json::array();
    for (const auto& c : report.conditions) conditions.push_back({{"label", c.label}, {"params", c.params}});
    json results = json::array();
    std::set<std::string> metric_names;
    for (const auto& r : report.results) {
        json e = {{"condition", r.condition},
                  {"repetition", r.repetition},
                  {"method", std::string(to_string(r.method))},
                  {"seed", r.seed},
                  {"metrics", r.metrics},
                  {"per_region_rmse", r.per_region_rmse}};
        if (!r.error.empty()) e["error"] = r.error;
        results.push_back(std::move(e));
        for (const auto& [k, v] : r.metrics) metric_names.insert(k);
    }
    json agg = json::array();
    for (std::size_t c = 0; c < report.conditions.size(); ++c) {
        for (Method m : s.methods) {
            for (const auto& metric : metric_names) {
                const auto a = report.summary(c, m, metric);
                if (a.count == 0) continue;
                agg.push_back({{"condition", c},
                               {"method", std::string(to_string(m))},
                               {"metric", metric},
                               {"mean", a.mean},
                               {"std", a.std},
                               {"count", a.count}});
            }
        }
    }
    return {{"experiment_id", report.experiment_id},
            {"seed", s.seed},
            {"repetitions", s.repetitions},
            {"methods", methods},
            {"regions", s.regions},
            {"generator", to_json(s.spec)},
            {"hyperparameters", to_json(s.hp)},
            {"eb", eb_to_json(s.eb)},
            {"parameters", report.parameters},
            {"conditions", conditions},
            {"results", results},
            {"aggregate", agg}};
}

std::string report_flat_csv(const ExperimentReport& report) {
    Table t;
    t.header = {"experiment", "condition", "repetition", "method", "metric", "value"};
    for (const auto& r : report.results) {
        const auto& label = report.conditions.at(r.condition).label;
        const std::string method(to_string(r.method));
        for (const auto& [k, v] : r.metrics)
            t.rows.push_back({report.experiment_id, label, std::to_string(r.repetition), method, k, format_double(v)});
        for (const auto& [k, v] : r.per_region_rmse)
            t.rows.push_back(
                {report.experiment_id, label, std::to_string(r.repetition), method, "rmse:" + k, format_double(v)});
    }
    return to_csv(t);
}

std::string report_table_tsv(const ExperimentReport& report) {
    std::set<std::string> params;
    for (const auto& c : report.conditions) {
        for (const auto& [k, v] : c.params) params.insert(k);
    }
    std::set<std::string> metrics;
    for (const auto& r : report.results) {
        for (const auto& [k, v] : r.metrics) metrics.insert(k);
    }
    std::ostringstream os;
    os << "condition";
    for (const auto& p : params) os << '\t' << p;
    os << "\tmethod\tn";
    for (const auto& m : metrics) os << '\t' << m << "_mean\t" << m << "_std";
    os << '\n';
    for (std::size_t c = 0; c < report.conditions.size(); ++c) {
        const auto& cond = report.conditions[c];
        for (Method m : report.settings.methods) {
            os << cond.label;
            for (const auto& p : params) {
                auto it = cond.params.find(p);
                os << '\t' << (it == cond.params.end() ? std::string() : format_double(it->second));
            }
            std::size_t n = 0;
            std::ostringstream cells;
            for (const auto& metric : metrics) {
                const auto a = report.summary(c, m, metric);
                n = std::max(n, a.count);
                if (a.count == 0) {
                    cells << "\t\t";
                } else {
                    cells << '\t' << format_double(a.mean) << '\t' << format_double(a.std);
                }
            }
            os << '\t' << to_string(m) << '\t' << n << cells.str() << '\n';
        }
    }
    return os.str();
}

}  // namespace ccombat::io
