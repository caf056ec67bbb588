// Command-line front end. Everything substantive happens behind the C API:
// this file only turns flags into configuration keys, so the option set, the
// defaults, and the help lines all come from the library's schema and can
// never drift from it.

#include <cstdio>
#include <list>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "condinst/condinst.h"

namespace {

struct BoundOption {
    std::string key;
    std::string value;
    CLI::Option* opt = nullptr;
};

struct SubState {
    CLI::App* app = nullptr;
    std::vector<std::string> configs;
    std::vector<std::string> sets;
    std::list<BoundOption> options;  // stable addresses for CLI11 bindings
};

std::string type_label(const std::string& type) {
    if (type == "int" || type == "uint") return "INT";
    if (type == "real") return "NUM";
    if (type == "bool") return "BOOL";
    if (type == "path") return "PATH";
    if (type == "int-list" || type == "real-list") return "LIST";
    return "TEXT";
}

int apply_and_run(ci_context* ctx, SubState& st) {
    for (const std::string& path : st.configs) {
        const ci_status rc = ci_load_config_file(ctx, path.c_str());
        if (rc != CI_OK) return rc;
    }
    for (const BoundOption& bound : st.options) {
        if (bound.opt->count() == 0) continue;
        const ci_status rc = ci_set(ctx, bound.key.c_str(), bound.value.c_str());
        if (rc != CI_OK) return rc;
    }
    for (const std::string& pair : st.sets) {
        const size_t eq = pair.find('=');
        if (eq == std::string::npos || eq == 0) {
            std::fprintf(stderr, "error: --set needs KEY=VALUE, got '%s'\n", pair.c_str());
            return CI_USAGE_ERROR;
        }
        const std::string key = pair.substr(0, eq);
        const std::string value = pair.substr(eq + 1);
        const ci_status rc = ci_set(ctx, key.c_str(), value.c_str());
        if (rc != CI_OK) return rc;
    }
    return ci_run(ctx, st.app->get_name().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    ci_context* ctx = ci_context_new();
    if (ctx == nullptr) {
        std::fprintf(stderr, "error: out of memory\n");
        return CI_DATA_ERROR;
    }

    CLI::App app{std::string("Instance and panoptic segmentation with per-instance dynamic "
                             "mask heads (") +
                 ci_version() +
                 ").\nMask computation honors the CONDINST_THREADS environment variable "
                 "(default 1 worker)."};
    app.require_subcommand(1);

    std::list<SubState> subs;
    try {
        const nlohmann::json schema = nlohmann::json::parse(ci_schema_json(ctx, nullptr));
        for (const nlohmann::json& cmd : schema.at("commands")) {
            SubState& st = subs.emplace_back();
            st.app = app.add_subcommand(cmd.at("command").get<std::string>(),
                                        cmd.at("summary").get<std::string>());
            st.app->add_option("--config", st.configs,
                               "flat key = value file(s), applied before flags");
            st.app->add_option("--set", st.sets, "extra KEY=VALUE pair(s), applied last");
            for (const nlohmann::json& o : cmd.at("options")) {
                BoundOption& bound = st.options.emplace_back();
                bound.key = o.at("key").get<std::string>();
                const std::string def = o.at("default").get<std::string>();
                const std::string help = o.at("help").get<std::string>() + " (default: " +
                                         (def.empty() ? "none" : def) + ")";
                bound.opt = st.app->add_option("--" + bound.key, bound.value, help);
                bound.opt->type_name(type_label(o.at("type").get<std::string>()))->take_last();
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: broken option schema: %s\n", e.what());
        ci_context_free(ctx);
        return CI_DATA_ERROR;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        ci_context_free(ctx);
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        ci_context_free(ctx);
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the message (and help where CLI11 sees fit)
        ci_context_free(ctx);
        return CI_USAGE_ERROR;
    }

    int rc = 0;
    for (SubState& st : subs) {
        if (!st.app->parsed()) continue;
        rc = apply_and_run(ctx, st);
        if (rc != CI_OK) {
            const char* message = ci_last_error(ctx);
            if (message != nullptr && *message != '\0')
                std::fprintf(stderr, "error: %s\n", message);
            if (rc == CI_USAGE_ERROR)
                std::fprintf(stderr, "\n%s", st.app->help().c_str());
        }
        break;
    }
    ci_context_free(ctx);
    return rc;
}
