#include <cstdio>
#include <fstream>
#include <sstream>

#include "soupforge/metrics.hpp"

namespace soupforge {

namespace {

std::string fixed4(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

std::string render_report(const std::vector<EvalRow>& rows) {
    std::ostringstream os;
    os << "surrogate,attack,variant,target,asr,l2,linf,psnr,ssim,flatness\n";
    for (const EvalRow& r : rows) {
        for (const std::string* s : {&r.surrogate, &r.attack, &r.variant, &r.target})
            if (s->find_first_of(",\n\r") != std::string::npos)
                throw IoError("report: field contains a delimiter: " + *s);
        os << r.surrogate << ',' << r.attack << ',' << r.variant << ',' << r.target << ',' << fixed4(r.asr)
           << ',' << fixed4(r.l2) << ',' << fixed4(r.linf) << ',' << fixed4(r.psnr) << ',' << fixed4(r.ssim)
           << ',' << fixed4(r.flatness) << '\n';
    }
    return os.str();
}

std::string render_surface(const std::vector<std::array<double, 3>>& grid) {
    std::ostringstream os;
    os << "u,v,loss\n";
    for (const auto& p : grid) os << fixed4(p[0]) << ',' << fixed4(p[1]) << ',' << fixed4(p[2]) << '\n';
    return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(content.data(), std::streamsize(content.size()));
    if (!f) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

}  // namespace soupforge
