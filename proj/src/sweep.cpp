#include "cad/sweep.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "cad/error.hpp"

namespace cad::sweep {

namespace {

const std::vector<std::string> kAxes{"log10_lambda_ood", "log10_lambda_prior", "memory_cap"};

double parse_value(std::string_view s, std::string_view axis) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw ConfigError("axis " + std::string(axis) + ": '" + std::string(s) + "' is not a number");
    }
    return v;
}

double axis_value(const std::vector<Axis>& axes, std::span<const double> point, std::string_view name, double fallback) {
    for (std::size_t a = 0; a < axes.size(); ++a) {
        if (axes[a].name == name) return point[a];
    }
    return fallback;
}

nlohmann::json row_to_json(const Row& r) {
    return {{"ok", r.ok}, {"error", r.error}, {"acc", r.final_group_accuracy},
            {"avg", r.average_accuracy}, {"cost", r.inspection_cost}};
}

void row_from_json(const nlohmann::json& j, Row& r) {
    r.ok = j.at("ok").get<bool>();
    r.error = j.at("error").get<std::string>();
    r.final_group_accuracy = j.at("acc").get<std::vector<double>>();
    r.average_accuracy = j.at("avg").get<double>();
    r.inspection_cost = j.at("cost").get<std::size_t>();
}

void evaluate(const RunConfig& base, const std::vector<Axis>& axes, const Runner& runner, Row& row) {
    try {
        const report::MetricsLog log = runner(apply_point(base, axes, row.point, row.index));
        row.final_group_accuracy = log.final_group_accuracy();
        row.average_accuracy = log.average_final_accuracy();
        row.inspection_cost = log.inspection_cost;
        row.ok = true;
    } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
    }
}

struct Worker {
    pid_t pid = -1;
    int fd = -1;
    std::size_t row = 0;
};

std::string drain(int fd) {
    std::string out;
    char buf[4096];
    for (;;) {
        const ssize_t n = ::read(fd, buf, sizeof buf);
        if (n > 0) {
            out.append(buf, static_cast<std::size_t>(n));
        } else if (n == 0 || errno != EINTR) {
            break;
        }
    }
    ::close(fd);
    return out;
}

void collect(Worker& w, std::vector<Row>& rows) {
    const std::string payload = drain(w.fd);
    int status = 0;
    ::waitpid(w.pid, &status, 0);
    Row& r = rows[w.row];
    try {
        row_from_json(nlohmann::json::parse(payload), r);
    } catch (const std::exception&) {
        r.ok = false;
        r.error = "worker process exited without a result (status " + std::to_string(status) + ")";
    }
}

} // namespace

Axis parse_axis(std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw ConfigError("axis '" + std::string(text) + "' must look like name=v1,v2");
    Axis axis;
    axis.name = std::string(text.substr(0, eq));
    if (std::find(kAxes.begin(), kAxes.end(), axis.name) == kAxes.end()) {
        throw ConfigError("unknown sweep axis '" + axis.name +
                          "' (expected log10_lambda_ood, log10_lambda_prior or memory_cap)");
    }
    std::string_view rest = text.substr(eq + 1);
    while (true) {
        const auto comma = rest.find(',');
        axis.values.push_back(parse_value(rest.substr(0, comma), axis.name));
        if (comma == std::string_view::npos) break;
        rest.remove_prefix(comma + 1);
    }
    if (axis.name == "memory_cap") {
        for (double v : axis.values) {
            if (v < 0 || v != std::floor(v)) throw ConfigError("axis memory_cap takes non-negative integers");
        }
    }
    return axis;
}

std::vector<std::vector<double>> grid_points(const std::vector<Axis>& axes) {
    std::vector<std::vector<double>> points{{}};
    for (const Axis& axis : axes) {
        if (axis.values.empty()) throw ConfigError("axis " + axis.name + " has no values");
        std::vector<std::vector<double>> next;
        for (const auto& p : points) {
            for (double v : axis.values) {
                next.push_back(p);
                next.back().push_back(v);
            }
        }
        points = std::move(next);
    }
    return points;
}

RunConfig apply_point(const RunConfig& base, const std::vector<Axis>& axes, std::span<const double> point,
                      std::size_t index) {
    if (point.size() != axes.size()) throw ShapeError("sweep point does not match the axes");
    RunConfig cfg = base;
    for (std::size_t a = 0; a < axes.size(); ++a) {
        const std::string& name = axes[a].name;
        if (name == "log10_lambda_ood") cfg.continual.lambda_ood = std::pow(10.0, point[a]);
        else if (name == "log10_lambda_prior") cfg.continual.lambda_prior = std::pow(10.0, point[a]);
        else if (name == "memory_cap") cfg.continual.memory_cap = static_cast<std::size_t>(point[a]);
    }
    cfg.train.seed = base.train.seed ^ static_cast<std::uint64_t>(index);
    char dir[32];
    std::snprintf(dir, sizeof dir, "point-%03zu", index);
    cfg.output_dir = (std::filesystem::path(base.output_dir) / dir).string();
    cfg.validate();
    return cfg;
}

std::vector<Row> run_sweep(const RunConfig& base, const std::vector<Axis>& axes, const Runner& runner,
                           std::size_t jobs) {
    const auto points = grid_points(axes);
    std::vector<Row> rows(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        rows[i].index = i;
        rows[i].point = points[i];
    }
    if (jobs <= 1) {
        for (Row& r : rows) evaluate(base, axes, runner, r);
        return rows;
    }

    std::vector<Worker> active;
    std::size_t next = 0;
    while (next < rows.size() || !active.empty()) {
        while (next < rows.size() && active.size() < jobs) {
            int fds[2];
            if (::pipe(fds) != 0) throw IoError("could not create a pipe for a sweep worker");
            const pid_t pid = ::fork();
            if (pid < 0) throw IoError("could not fork a sweep worker");
            if (pid == 0) {
                ::close(fds[0]);
                Row r = rows[next];
                evaluate(base, axes, runner, r);
                const std::string payload = row_to_json(r).dump();
                std::size_t off = 0;
                while (off < payload.size()) {
                    const ssize_t n = ::write(fds[1], payload.data() + off, payload.size() - off);
                    if (n <= 0) break;
                    off += static_cast<std::size_t>(n);
                }
                ::close(fds[1]);
                ::_exit(0);
            }
            ::close(fds[1]);
            active.push_back({pid, fds[0], next});
            ++next;
        }
        // finish the oldest worker first; results are stored by index
        collect(active.front(), rows);
        active.erase(active.begin());
    }
    return rows;
}

std::optional<std::size_t> best_row(const std::vector<Row>& rows, const std::vector<Axis>& axes) {
    std::optional<std::size_t> best;
    auto key = [&](const Row& r) {
        return std::make_tuple(-r.average_accuracy, axis_value(axes, r.point, "log10_lambda_prior", 0.0),
                               axis_value(axes, r.point, "log10_lambda_ood", 0.0));
    };
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].ok) continue;
        if (!best || key(rows[i]) < key(rows[*best])) best = i;
    }
    return best;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<Axis>& axes, const std::vector<Row>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    std::size_t groups = 0;
    for (const Row& r : rows) groups = std::max(groups, r.final_group_accuracy.size());
    out << "index";
    for (const Axis& a : axes) out << ',' << a.name;
    for (std::size_t g = 0; g < groups; ++g) out << ",group" << g;
    out << ",average,inspection_cost,status\n";
    for (const Row& r : rows) {
        out << r.index;
        for (double v : r.point) out << ',' << report::format_number(v);
        for (std::size_t g = 0; g < groups; ++g) {
            out << ',';
            if (g < r.final_group_accuracy.size()) out << report::format_number(r.final_group_accuracy[g]);
        }
        out << ',' << (r.ok ? report::format_number(r.average_accuracy) : "") << ',' << r.inspection_cost << ',';
        if (r.ok) {
            out << "ok";
        } else {
            std::string msg = r.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            out << "error: " << msg;
        }
        out << '\n';
    }
}

} // namespace cad::sweep
